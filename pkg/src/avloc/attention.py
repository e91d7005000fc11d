"""Audio-visual attention: response maps, pseudo-masks, pooled responses.

The response map holds the cosine similarity between one audio feature
vector and every spatial vector of a vision feature grid. A sharp sigmoid
of (map - epsilon) / tau turns it into a soft pseudo-mask selecting
confidently sounding sites, and the mask-weighted mean of the map is the
scalar "response" the training objective works with.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .encoders import AudioFeature, VisionFeature

DEFAULT_EPSILON = 0.65
DEFAULT_TAU = 0.03

# Keep pseudo-mask entries strictly inside (0, 1) even when the sigmoid
# saturates in float64.
_MASK_FLOOR = np.finfo(float).tiny
_MASK_CEIL = np.nextafter(1.0, 0.0)


@dataclass
class ResponseMap:
    """Cosine similarities (h, w), each in [-1, 1].

    ``degenerate`` flags that some site (or the audio vector) had zero norm
    and its cosine was defined as 0.
    """

    values: np.ndarray
    degenerate: bool = False


@dataclass
class PseudoMask:
    """Soft selection mask (h, w), entries strictly in (0, 1)."""

    values: np.ndarray


def response_map(audio: AudioFeature, vision: VisionFeature) -> ResponseMap:
    """Per-site cosine similarity between an audio vector and a feature grid.

    Sites with zero norm (or a zero-norm audio vector) get cosine 0 and set
    the degeneracy flag rather than raising.
    """
    a = audio.values
    v = vision.values
    if a.shape[0] != v.shape[0]:
        raise ValueError(
            f"channel mismatch: audio {a.shape[0]} vs vision {v.shape[0]}"
        )
    a_norm = np.linalg.norm(a)
    site_norms = np.linalg.norm(v, axis=0)
    degenerate = a_norm == 0.0 or bool(np.any(site_norms == 0.0))
    denom = a_norm * np.where(site_norms > 0.0, site_norms, 1.0)
    values = np.tensordot(a, v, axes=(0, 0)) / np.where(denom > 0.0, denom, 1.0)
    values = np.where((a_norm > 0.0) & (site_norms > 0.0), values, 0.0)
    return ResponseMap(values=values, degenerate=degenerate)


def mask_values(alpha: np.ndarray, epsilon: float, tau: float) -> np.ndarray:
    """sigmoid((alpha - epsilon) / tau), clipped into the open unit interval."""
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    return np.clip(expit((alpha - epsilon) / tau), _MASK_FLOOR, _MASK_CEIL)


def pseudo_mask(
    resp: ResponseMap, epsilon: float = DEFAULT_EPSILON, tau: float = DEFAULT_TAU
) -> PseudoMask:
    """Soft thresholding of a response map into a pseudo-ground-truth mask."""
    return PseudoMask(values=mask_values(resp.values, epsilon, tau))


def masked_response(mask: PseudoMask, resp: ResponseMap) -> float:
    """Mask-weighted mean response, <m, alpha> / sum(m).

    Always lies within [min(alpha), max(alpha)]; the zero-mass guard cannot
    trigger for a valid PseudoMask.
    """
    m = mask.values
    alpha = resp.values
    if m.shape != alpha.shape:
        raise ValueError(f"shape mismatch: mask {m.shape} vs map {alpha.shape}")
    mass = m.sum()
    if mass <= 0.0:
        raise ValueError("pseudo-mask has zero mass")
    return float((m * alpha).sum() / mass)


def mean_response(resp: ResponseMap) -> float:
    """Arithmetic mean of all map entries."""
    return float(resp.values.mean())


def masked_response_map_grad(
    alpha: np.ndarray,
    epsilon: float = DEFAULT_EPSILON,
    tau: float = DEFAULT_TAU,
    stop_grad_mask: bool = False,
) -> np.ndarray:
    """d/d(alpha) of masked_response(pseudo_mask(alpha), alpha).

    With ``stop_grad_mask`` the mask is treated as a constant and only the
    weighted-mean path contributes.
    """
    m = mask_values(alpha, epsilon, tau)
    mass = m.sum()
    if stop_grad_mask:
        return m / mass
    pooled = (m * alpha).sum() / mass
    dm = m * (1.0 - m) / tau
    return (m + dm * (alpha - pooled)) / mass


def response_map_grad(
    audio: AudioFeature, vision: VisionFeature, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradients of the cosine response map.

    ``upstream`` is d(loss)/d(map) with shape (h, w). Returns the gradient
    w.r.t. the audio vector (c,) and the vision grid (c, h, w). Degenerate
    zero-norm sites contribute nothing.
    """
    a = audio.values
    v = vision.values
    if upstream.shape != v.shape[1:]:
        raise ValueError(
            f"upstream has shape {upstream.shape}, expected {v.shape[1:]}"
        )
    a_norm = np.linalg.norm(a)
    site_norms = np.linalg.norm(v, axis=0)
    ok = (a_norm > 0.0) & (site_norms > 0.0)
    safe_a = a_norm if a_norm > 0.0 else 1.0
    safe_sites = np.where(site_norms > 0.0, site_norms, 1.0)
    a_hat = a / safe_a
    v_hat = v / safe_sites
    alpha = np.where(ok, np.tensordot(a_hat, v_hat, axes=(0, 0)), 0.0)
    up = np.where(ok, upstream, 0.0)

    # d(alpha_s)/dA = (v_hat_s - alpha_s * a_hat) / |A|
    d_audio = (np.tensordot(v_hat, up, axes=([1, 2], [0, 1])) - (up * alpha).sum() * a_hat) / safe_a
    # d(alpha_s)/dV_s = (a_hat - alpha_s * v_hat_s) / |V_s|
    d_vision = up * (a_hat[:, None, None] - alpha * v_hat) / safe_sites
    if a_norm == 0.0:
        d_audio = np.zeros_like(a)
    return d_audio, d_vision


def write_response_pgm(resp: ResponseMap, path: str | Path) -> None:
    """Export a response map as ASCII PGM, [-1, 1] mapped linearly to 0..255."""
    values = np.clip(np.rint((resp.values + 1.0) * 127.5), 0, 255).astype(int)
    h, w = values.shape
    rows = "\n".join(" ".join(str(v) for v in row) for row in values)
    Path(path).write_text(f"P2\n{w} {h}\n255\n{rows}\n")
