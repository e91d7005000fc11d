"""Contrastive objective over pooled attention responses, with exact gradients.

Per anchor, the numerator aggregates up to four positive responses: the
base pair, the anchor image with a mined similar audio, the anchor audio
with a mined similar image, and the fully swapped cross pair. Each is the
pseudo-mask-weighted mean of its response map. The denominator adds, for
every negative image, the exponential of the plain mean response. The
batch loss is the mean of -log(P / (P + N)).

``loss_and_grad`` runs the whole pipeline (encoders -> response maps ->
masks -> loss) on a minibatch and backpropagates by hand to the encoder
parameters; it is the single differentiable path the trainer uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import exp, log, log1p
from typing import Iterable, Sequence

import numpy as np

from . import attention, encoders
from .attention import DEFAULT_EPSILON, DEFAULT_TAU
from .encoders import AudioFeature, EncoderParams, VisionFeature
from .synthdata import SamplePair

# Inert for valid responses (P >= 4/e when all four terms are present);
# guards corrupted inputs only.
_RATIO_FLOOR = 1e-30

_ALL_TERMS = ("b", "a", "v", "c")


class NonFiniteError(ArithmeticError):
    """A loss or gradient evaluation produced a non-finite value."""


@dataclass
class ResponseBundle:
    """Scalar responses of one anchor: four positives and the negative sum.

    ``p_a``/``p_v``/``p_c`` are None when the corresponding hard positive
    was not used (the vanilla objective keeps only ``p_b``).
    """

    anchor: int
    p_b: float
    p_a: float | None = None
    p_v: float | None = None
    p_c: float | None = None
    n_i: float = 0.0
    hard_audio: int | None = None
    hard_vision: int | None = None

    @property
    def p_i(self) -> float:
        """Sum of exp over the present positive responses."""
        return sum(exp(p) for p in (self.p_b, self.p_a, self.p_v, self.p_c)
                   if p is not None)

    def term(self, name: str) -> float | None:
        return {"b": self.p_b, "a": self.p_a, "v": self.p_v, "c": self.p_c}[name]

    def validate(self) -> None:
        present = [p for p in (self.p_b, self.p_a, self.p_v, self.p_c)
                   if p is not None]
        if not np.all(np.isfinite(present)) or not np.isfinite(self.n_i):
            raise NonFiniteError(f"bundle for anchor {self.anchor} is non-finite")
        if self.n_i < 0.0:
            raise ValueError(f"negative response sum must be >= 0, got {self.n_i}")


def positive_responses(
    audio_i: AudioFeature,
    vision_i: VisionFeature,
    audio_j: AudioFeature,
    vision_k: VisionFeature,
    epsilon: float = DEFAULT_EPSILON,
    tau: float = DEFAULT_TAU,
) -> tuple[float, float, float, float]:
    """Masked responses of the four positive pairings.

    Order: (base i-i, swapped-audio j-i, swapped-vision i-k, cross j-k).
    """
    def pooled(a: AudioFeature, v: VisionFeature) -> float:
        resp = attention.response_map(a, v)
        return attention.masked_response(
            attention.pseudo_mask(resp, epsilon, tau), resp
        )

    return (
        pooled(audio_i, vision_i),
        pooled(audio_j, vision_i),
        pooled(audio_i, vision_k),
        pooled(audio_j, vision_k),
    )


def negative_response(
    audio_i: AudioFeature, negatives: Iterable[VisionFeature]
) -> float:
    """Sum over negatives of exp(mean response); 0 for an empty set."""
    total = 0.0
    for vis in negatives:
        total += exp(attention.mean_response(attention.response_map(audio_i, vis)))
    return total


def _nll(p: float, n: float) -> float:
    ratio = p / (p + n)
    if ratio < _RATIO_FLOOR:
        return -log(_RATIO_FLOOR)
    return log1p(n / p)


def contrastive_loss(
    bundles: Sequence[ResponseBundle], terms: tuple[str, ...] = _ALL_TERMS
) -> float:
    """Mean of -log(P / (P + N)) with P restricted to the named terms."""
    if not bundles:
        raise ValueError("empty bundle batch")
    unknown = set(terms) - set(_ALL_TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    total = 0.0
    for bundle in bundles:
        bundle.validate()
        p = 0.0
        for name in terms:
            value = bundle.term(name)
            if value is None:
                raise ValueError(
                    f"bundle for anchor {bundle.anchor} lacks term {name!r}"
                )
            p += exp(value)
        total += _nll(p, bundle.n_i)
    return total / len(bundles)


def loss_hp(bundles: Sequence[ResponseBundle]) -> float:
    """Hard-positive loss: numerator uses all four positive responses."""
    return contrastive_loss(bundles, _ALL_TERMS)


def loss_vanilla(bundles: Sequence[ResponseBundle]) -> float:
    """Baseline loss: numerator uses only the base-pair response."""
    return contrastive_loss(bundles, ("b",))


# ---------------------------------------------------------------------------
# full differentiable path
# ---------------------------------------------------------------------------


@dataclass
class BatchItem:
    """One anchor plus its sampled hard positives and its negative images.

    Samples are deduplicated by id across the batch, so distinct items may
    reference the same SamplePair objects cheaply.
    """

    anchor: SamplePair
    hard_audio: SamplePair | None = None
    hard_vision: SamplePair | None = None
    negatives: tuple[SamplePair, ...] = ()


class _RowCache:
    """Assigns one encoding row per unique sample id."""

    def __init__(self) -> None:
        self.rows: dict[int, int] = {}
        self.inputs: list[np.ndarray] = []

    def row(self, sample: SamplePair, field: str) -> int:
        if sample.id not in self.rows:
            self.rows[sample.id] = len(self.inputs)
            self.inputs.append(getattr(sample, field))
        return self.rows[sample.id]


def loss_and_grad(
    params: EncoderParams,
    items: Sequence[BatchItem],
    epsilon: float = DEFAULT_EPSILON,
    tau: float = DEFAULT_TAU,
    stop_grad_mask: bool = False,
) -> tuple[float, EncoderParams, list[ResponseBundle]]:
    """Loss and exact parameter gradients for a minibatch.

    The numerator of each anchor includes the base term plus whichever
    hard-positive terms its item provides; the denominator sums over the
    item's negative images. Returns (loss, gradients, bundles); raises
    :class:`NonFiniteError` if anything non-finite appears.
    """
    if not items:
        raise ValueError("empty batch")
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    cfg = params.config
    audio_cache = _RowCache()
    vision_cache = _RowCache()
    plans = []
    for item in items:
        plan = {
            "ia": audio_cache.row(item.anchor, "audio"),
            "iv": vision_cache.row(item.anchor, "image"),
            "ja": audio_cache.row(item.hard_audio, "audio")
            if item.hard_audio is not None else None,
            "kv": vision_cache.row(item.hard_vision, "image")
            if item.hard_vision is not None else None,
            "neg": [vision_cache.row(s, "image") for s in item.negatives],
        }
        plans.append(plan)

    audio_in = np.stack(audio_cache.inputs)
    vision_in = np.stack(vision_cache.inputs)
    feats_a = encoders.encode_audio_batch(params, audio_in)
    feats_v = encoders.encode_vision_batch(params, vision_in)
    n_sites = feats_v.shape[1]

    a_norms = np.linalg.norm(feats_a, axis=1)
    v_norms = np.linalg.norm(feats_v, axis=2)
    a_ok = a_norms > 0.0
    v_ok = v_norms > 0.0
    unit_a = np.where(a_ok[:, None], feats_a / np.where(a_ok, a_norms, 1.0)[:, None], 0.0)
    unit_v = np.where(
        v_ok[:, :, None], feats_v / np.where(v_ok, v_norms, 1.0)[:, :, None], 0.0
    )
    # resp[a, v, s]: cosine of audio row a against site s of vision row v
    resp = np.einsum("ac,vsc->avs", unit_a, unit_v)
    resp_mean = resp.mean(axis=2)

    bundles: list[ResponseBundle] = []
    pair_lists: list[list[tuple[str, int, int, float]]] = []
    losses = np.zeros(len(items))
    for idx, (item, plan) in enumerate(zip(items, plans)):
        pairs = [("b", plan["ia"], plan["iv"])]
        if plan["ja"] is not None:
            pairs.append(("a", plan["ja"], plan["iv"]))
        if plan["kv"] is not None:
            pairs.append(("v", plan["ia"], plan["kv"]))
        if plan["ja"] is not None and plan["kv"] is not None:
            pairs.append(("c", plan["ja"], plan["kv"]))
        evaluated = []
        terms = {}
        for name, ar, vr in pairs:
            alpha = resp[ar, vr]
            mask = attention.mask_values(alpha, epsilon, tau)
            pooled = float((mask * alpha).sum() / mask.sum())
            evaluated.append((name, ar, vr, pooled))
            terms[name] = pooled
        n_i = float(np.exp(resp_mean[plan["ia"], plan["neg"]]).sum())
        bundles.append(
            ResponseBundle(
                anchor=item.anchor.id,
                p_b=terms["b"],
                p_a=terms.get("a"),
                p_v=terms.get("v"),
                p_c=terms.get("c"),
                n_i=n_i,
                hard_audio=item.hard_audio.id if item.hard_audio else None,
                hard_vision=item.hard_vision.id if item.hard_vision else None,
            )
        )
        losses[idx] = _nll(bundles[-1].p_i, n_i)
        pair_lists.append(evaluated)

    loss = float(losses.mean())
    if not np.isfinite(loss):
        raise NonFiniteError("loss is non-finite")

    # backward: d(loss)/d(resp)
    d_resp = np.zeros_like(resp)
    scale = 1.0 / len(items)
    for item, plan, bundle, evaluated in zip(items, plans, bundles, pair_lists):
        p = bundle.p_i
        denom = p + bundle.n_i
        for name, ar, vr, pooled in evaluated:
            coeff = scale * exp(pooled) * (1.0 / denom - 1.0 / p)
            d_resp[ar, vr] += coeff * attention.masked_response_map_grad(
                resp[ar, vr], epsilon, tau, stop_grad_mask
            )
        if plan["neg"]:
            mu = resp_mean[plan["ia"], plan["neg"]]
            d_mu = scale * np.exp(mu) / denom
            d_resp[plan["ia"], plan["neg"]] += (d_mu / n_sites)[:, None]

    # cosine backward through the row/site normalizations
    d_unit_a = np.einsum("avs,vsc->ac", d_resp, unit_v)
    d_unit_v = np.einsum("avs,ac->vsc", d_resp, unit_a)
    d_feats_a = (
        d_unit_a - (d_unit_a * unit_a).sum(axis=1, keepdims=True) * unit_a
    ) / np.where(a_ok, a_norms, 1.0)[:, None]
    d_feats_a[~a_ok] = 0.0
    d_feats_v = (
        d_unit_v - (d_unit_v * unit_v).sum(axis=2, keepdims=True) * unit_v
    ) / np.where(v_ok, v_norms, 1.0)[:, :, None]
    d_feats_v[~v_ok] = 0.0

    d_wa, d_ba = encoders.audio_backward_batch(params, audio_in, feats_a, d_feats_a)
    d_wv, d_bv = encoders.vision_backward_batch(params, vision_in, feats_v, d_feats_v)
    grads = EncoderParams(
        config=cfg,
        vision_weights=d_wv,
        vision_bias=d_bv,
        audio_weights=d_wa,
        audio_bias=d_ba,
    )
    if not np.all(np.isfinite(grads.to_vector())):
        raise NonFiniteError("gradients are non-finite")
    return loss, grads, bundles
