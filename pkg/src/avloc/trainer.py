"""Two-stage training: baseline contrastive pass, mining, hard-positive pass.

Stage 1 minimizes the vanilla loss with every non-anchor batch member as a
negative. Its frozen features are then mined once into a neighbor index,
and stage 2 minimizes the hard-positive loss with index-driven in-batch
negatives. Plain SGD, seeded shuffling, and per-epoch derived RNG streams
keep every trajectory bit-reproducible and resumable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoders, mining
from .encoders import EncoderConfig, EncoderParams, init_params
from .mining import MiningIndex
from .objective import BatchItem, NonFiniteError, loss_and_grad
from .synthdata import SamplePair, SynthConfig

MODES = ("vanilla", "hp", "random_hp")


@dataclass(frozen=True)
class TrainConfig:
    """Schedule, optimizer and objective settings for one run.

    The default schedule keeps stage 1 short: it only needs features good
    enough for mining, and prolonged contrastive training degenerates the
    response maps into a few sharp peaks that localize poorly.
    """

    epochs_stage1: int = 10
    epochs_stage2: int = 25
    batch_size: int = 16
    learning_rate: float = 0.015
    epsilon: float = 0.65
    tau: float = 0.03
    k: int = 1000
    seed: int = 0
    stop_grad_mask: bool = False
    remine_every: int = 0
    mode: str = "hp"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self) -> None:
        if self.batch_size < 3:
            raise ValueError(f"batch_size must be >= 3, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.remine_every < 0:
            raise ValueError(f"remine_every must be >= 0, got {self.remine_every}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.encoder.validate()


@dataclass
class TrainLogRecord:
    stage: int
    epoch: int
    step: int
    loss: float
    grad_norm: float


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss; carries the last finite parameters."""

    def __init__(self, message: str, params: EncoderParams,
                 logs: list[TrainLogRecord]):
        super().__init__(message)
        self.params = params
        self.logs = logs


def desk_scale_configs(seed: int = 0) -> tuple[SynthConfig, TrainConfig]:
    """Default desk-scale benchmark: 200 samples, 10 classes, K=19."""
    return SynthConfig(seed=seed), TrainConfig(k=19, seed=seed)


def sgd_step(
    params: EncoderParams, grads: EncoderParams, learning_rate: float
) -> EncoderParams:
    """One plain gradient step, params - lr * grads; pure."""
    gvec = grads.to_vector()
    if not np.all(np.isfinite(gvec)):
        raise ValueError("non-finite gradients")
    return EncoderParams.from_vector(
        params.config, params.to_vector() - learning_rate * gvec
    )


def mine_index(
    params: EncoderParams, dataset: Sequence[SamplePair], k: int
) -> MiningIndex:
    """Encode the dataset and build the neighbor index from those features."""
    audio_feats, pooled = encode_dataset_pooled(params, dataset)
    return mining.build_index(audio_feats, pooled, min(k, len(dataset) - 1))


def encode_dataset_pooled(
    params: EncoderParams, dataset: Sequence[SamplePair]
) -> tuple[np.ndarray, np.ndarray]:
    """Audio vectors (n, c) and pooled vision vectors (n, c) in dataset order."""
    audio_in = np.stack([s.audio for s in dataset])
    vision_in = np.stack([s.image for s in dataset])
    audio_feats = encoders.encode_audio_batch(params, audio_in)
    pooled = mining.pool_vision_batch(encoders.encode_vision_batch(params, vision_in))
    return audio_feats, pooled


def _check_ids(dataset: Sequence[SamplePair]) -> None:
    ids = [s.id for s in dataset]
    if ids != list(range(1, len(dataset) + 1)):
        raise ValueError("training requires samples with ids 1..n in order")


def _epoch_rng(seed: int, stream: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, epoch])


def _stage_items(
    batch: list[SamplePair],
    use_hard: bool,
    index: MiningIndex | None,
    neg_sets: dict[int, frozenset] | None,
    hp_rng: np.random.Generator,
    by_id: dict[int, SamplePair],
) -> list[BatchItem]:
    items = []
    for anchor in batch:
        if not use_hard:
            items.append(
                BatchItem(
                    anchor=anchor,
                    negatives=tuple(s for s in batch if s.id != anchor.id),
                )
            )
            continue
        pos_a = index.audio_positives(anchor.id)
        pos_v = index.vision_positives(anchor.id)
        j = pos_a[int(hp_rng.integers(len(pos_a)))]
        k = pos_v[int(hp_rng.integers(len(pos_v)))]
        negatives = tuple(s for s in batch if s.id in neg_sets[anchor.id])
        items.append(
            BatchItem(
                anchor=anchor,
                hard_audio=by_id[j],
                hard_vision=by_id[k],
                negatives=negatives,
            )
        )
    return items


def _run_stage(
    dataset: Sequence[SamplePair],
    params: EncoderParams,
    config: TrainConfig,
    stage: int,
    epochs: int,
    index: MiningIndex | None,
    epoch_offset: int,
) -> tuple[EncoderParams, list[TrainLogRecord]]:
    n = len(dataset)
    if n < config.batch_size:
        raise ValueError(f"dataset size {n} smaller than batch_size")
    by_id = {s.id: s for s in dataset}
    use_hard = stage == 2 and config.mode != "vanilla"
    neg_sets = None
    if use_hard:
        if index is None:
            raise ValueError(f"mode {config.mode!r} requires a mining index")
        neg_sets = {i: frozenset(index.negatives(i)) for i in range(1, n + 1)}
    logs: list[TrainLogRecord] = []
    for local_epoch in range(epochs):
        epoch = epoch_offset + local_epoch
        if (
            use_hard
            and config.remine_every > 0
            and local_epoch > 0
            and local_epoch % config.remine_every == 0
        ):
            if config.mode == "random_hp":
                index = mining.random_index(
                    n, min(config.k, n - 1), config.seed + epoch
                )
            else:
                index = mine_index(params, dataset, config.k)
            neg_sets = {i: frozenset(index.negatives(i)) for i in range(1, n + 1)}
        order = _epoch_rng(config.seed, 0, epoch).permutation(n)
        hp_rng = _epoch_rng(config.seed, 1, epoch)
        for step, start in enumerate(range(0, n, config.batch_size)):
            batch = [dataset[idx] for idx in order[start : start + config.batch_size]]
            items = _stage_items(batch, use_hard, index, neg_sets, hp_rng, by_id)
            try:
                loss, grads, _ = loss_and_grad(
                    params,
                    items,
                    epsilon=config.epsilon,
                    tau=config.tau,
                    stop_grad_mask=config.stop_grad_mask,
                )
            except NonFiniteError as exc:
                raise DivergenceError(
                    f"divergence at stage {stage} epoch {epoch} step {step}: {exc}",
                    params,
                    logs,
                ) from exc
            grad_norm = float(np.linalg.norm(grads.to_vector()))
            params = sgd_step(params, grads, config.learning_rate)
            logs.append(TrainLogRecord(stage, epoch, step, loss, grad_norm))
    return params, logs


def train_stage1(
    dataset: Sequence[SamplePair],
    config: TrainConfig,
    start_params: EncoderParams | None = None,
    epoch_offset: int = 0,
) -> tuple[EncoderParams, list[TrainLogRecord]]:
    """Baseline pass: vanilla loss, all non-anchor batch members as negatives."""
    config.validate()
    _check_ids(dataset)
    params = start_params if start_params is not None else init_params(
        config.encoder, config.seed
    )
    return _run_stage(
        dataset, params, config, 1, config.epochs_stage1, None, epoch_offset
    )


def train_stage2(
    dataset: Sequence[SamplePair],
    stage1_params: EncoderParams,
    index: MiningIndex | None,
    config: TrainConfig,
    epoch_offset: int = 0,
) -> tuple[EncoderParams, list[TrainLogRecord]]:
    """Hard-positive pass from a stage-1 checkpoint.

    ``mode='hp'`` uses the given index (mined if None), ``mode='random_hp'``
    draws a random index, ``mode='vanilla'`` ignores indices and reproduces
    the stage-1 update rule exactly.
    """
    config.validate()
    _check_ids(dataset)
    n = len(dataset)
    if index is None and config.mode == "hp":
        index = mine_index(stage1_params, dataset, config.k)
    if index is None and config.mode == "random_hp":
        index = mining.random_index(n, min(config.k, n - 1), config.seed)
    return _run_stage(
        dataset, stage1_params, config, 2, config.epochs_stage2, index, epoch_offset
    )


@dataclass
class TrainResult:
    stage1_params: EncoderParams
    final_params: EncoderParams
    index: MiningIndex | None
    logs: list[TrainLogRecord]


def train_full(dataset: Sequence[SamplePair], config: TrainConfig) -> TrainResult:
    """Stage 1, then mining per mode, then stage 2."""
    stage1_params, logs1 = train_stage1(dataset, config)
    index = None
    if config.mode == "hp":
        index = mine_index(stage1_params, dataset, config.k)
    elif config.mode == "random_hp":
        index = mining.random_index(
            len(dataset), min(config.k, len(dataset) - 1), config.seed
        )
    final_params, logs2 = train_stage2(dataset, stage1_params, index, config)
    return TrainResult(stage1_params, final_params, index, logs1 + logs2)


def grad_check(
    dataset: Sequence[SamplePair], config: TrainConfig, fd_step: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Builds one fixed batch over the given (tiny) dataset: every sample is an
    anchor; in hp mode its hard positives are the next two samples
    cyclically and its negatives are all other samples. Relative error is
    |a - f| / max(|a| + |f|, 1e-6) per parameter.

    The check always differentiates through the pseudo-masks: the stop-grad
    variant is deliberately not the gradient of the scalar objective, so
    finite differences cannot validate it.
    """
    config.validate()
    n = len(dataset)
    if n < 3:
        raise ValueError("grad_check needs at least 3 samples")
    params = init_params(config.encoder, config.seed)
    use_hard = config.mode != "vanilla"
    items = []
    for pos, anchor in enumerate(dataset):
        items.append(
            BatchItem(
                anchor=anchor,
                hard_audio=dataset[(pos + 1) % n] if use_hard else None,
                hard_vision=dataset[(pos + 2) % n] if use_hard else None,
                negatives=tuple(s for s in dataset if s.id != anchor.id),
            )
        )

    def eval_loss(vec: np.ndarray) -> float:
        p = EncoderParams.from_vector(config.encoder, vec)
        loss, _, _ = loss_and_grad(
            p, items, epsilon=config.epsilon, tau=config.tau
        )
        return loss

    _, grads, _ = loss_and_grad(
        params, items, epsilon=config.epsilon, tau=config.tau
    )
    analytic = grads.to_vector()
    base = params.to_vector()
    worst = 0.0
    for idx in range(base.size):
        bumped = base.copy()
        bumped[idx] = base[idx] + fd_step
        hi = eval_loss(bumped)
        bumped[idx] = base[idx] - fd_step
        lo = eval_loss(bumped)
        fd = (hi - lo) / (2.0 * fd_step)
        err = abs(analytic[idx] - fd) / max(abs(analytic[idx]) + abs(fd), 1e-6)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# run artifacts
# ---------------------------------------------------------------------------


def save_logs(logs: Sequence[TrainLogRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "epoch", "step", "loss", "grad_norm"])
        for rec in logs:
            writer.writerow(
                [rec.stage, rec.epoch, rec.step, repr(rec.loss), repr(rec.grad_norm)]
            )


def save_checkpoint(
    params: EncoderParams, path: str | Path, config: TrainConfig | None = None
) -> None:
    """Write an AVP1 checkpoint plus a `<path>.cfg` sidecar echoing the config."""
    encoders.save_params(params, path)
    if config is not None:
        enc = config.encoder
        lines = [
            f"epochs-stage1={config.epochs_stage1}",
            f"epochs-stage2={config.epochs_stage2}",
            f"batch-size={config.batch_size}",
            f"lr={config.learning_rate!r}",
            f"epsilon={config.epsilon!r}",
            f"tau={config.tau!r}",
            f"k={config.k}",
            f"seed={config.seed}",
            f"stop-grad-mask={str(config.stop_grad_mask).lower()}",
            f"remine-every={config.remine_every}",
            f"mode={config.mode}",
            f"channels={enc.channels}",
            f"patch-size={enc.patch_size}",
        ]
        Path(str(path) + ".cfg").write_text("\n".join(lines) + "\n")
