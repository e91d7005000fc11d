"""Localization evaluation: binarized response maps against ground-truth boxes.

The protocol is fixed as: min-max normalize the self-pair response map,
nearest-neighbor upsample to image resolution, threshold at 0.5 (ties
select), then score each sample by pixel IoU against its box. cIoU is the
fraction of samples with IoU >= 0.5 and AUC is the mean success rate over
the 19 thresholds 0.05..0.95.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoders, trainer
from .encoders import EncoderParams
from .synthdata import Box, FeatureSet, SamplePair
from .trainer import TrainConfig


@dataclass(frozen=True)
class EvalProtocol:
    binarize_threshold: float = 0.5
    success_threshold: float = 0.5
    auc_thresholds: tuple[float, ...] = tuple(0.05 * k for k in range(1, 20))


@dataclass
class EvalReport:
    ciou: float
    auc: float
    per_sample: list[tuple[int, float]]
    n_eval: int
    binarize_threshold: float
    success_threshold: float


def binarize_map(alpha: np.ndarray, image_size: tuple[int, int],
                 threshold: float = 0.5) -> np.ndarray:
    """Min-max normalize, nearest-neighbor upsample, threshold with >=.

    Constant maps normalize to all 0.5, so at the default threshold every
    pixel is selected.
    """
    alpha = np.asarray(alpha, dtype=float)
    lo, hi = alpha.min(), alpha.max()
    if hi > lo:
        normed = (alpha - lo) / (hi - lo)
    else:
        normed = np.full_like(alpha, 0.5)
    hv, wv = image_size
    h, w = normed.shape
    rows = (np.arange(hv) * h) // hv
    cols = (np.arange(wv) * w) // wv
    return normed[np.ix_(rows, cols)] >= threshold


def iou(pred: np.ndarray, gt_box: Box) -> float:
    """Pixel IoU between a boolean grid and a box; 0 when the union is empty."""
    x0, y0, x1, y1 = gt_box
    box = np.zeros_like(pred, dtype=bool)
    box[y0:y1, x0:x1] = True
    inter = np.count_nonzero(pred & box)
    union = np.count_nonzero(pred | box)
    return inter / union if union else 0.0


def _report(per_sample: list[tuple[int, float]], protocol: EvalProtocol) -> EvalReport:
    ious = np.array([v for _, v in per_sample])
    ciou = float(np.count_nonzero(ious >= protocol.success_threshold) / len(ious))
    auc = float(
        np.mean([np.count_nonzero(ious >= t) / len(ious)
                 for t in protocol.auc_thresholds])
    )
    return EvalReport(
        ciou=ciou,
        auc=auc,
        per_sample=per_sample,
        n_eval=len(per_sample),
        binarize_threshold=protocol.binarize_threshold,
        success_threshold=protocol.success_threshold,
    )


def evaluate(
    params: EncoderParams,
    dataset: Sequence[SamplePair],
    protocol: EvalProtocol = EvalProtocol(),
) -> EvalReport:
    """Score self-pair localization for every sample; requires ground-truth boxes."""
    if not dataset:
        raise ValueError("empty evaluation dataset")
    missing = [s.id for s in dataset if s.gt_box is None]
    if missing:
        raise ValueError(f"samples without gt_box: {missing[:5]}")
    cfg = params.config
    audio_feats = encoders.encode_audio_batch(
        params, np.stack([s.audio for s in dataset])
    )
    vision_sites = encoders.encode_vision_batch(
        params, np.stack([s.image for s in dataset])
    )
    h, w = cfg.grid_size
    per_sample = []
    order = np.argsort([s.id for s in dataset], kind="stable")
    for row in order:
        sample = dataset[row]
        a = audio_feats[row]
        v = vision_sites[row]
        a_norm = np.linalg.norm(a)
        v_norms = np.linalg.norm(v, axis=1)
        denom = a_norm * np.where(v_norms > 0, v_norms, 1.0)
        alpha = np.where(
            (a_norm > 0) & (v_norms > 0), v @ a / np.where(denom > 0, denom, 1.0), 0.0
        ).reshape(h, w)
        pred = binarize_map(alpha, cfg.image_size, protocol.binarize_threshold)
        per_sample.append((sample.id, iou(pred, sample.gt_box)))
    return _report(per_sample, protocol)


def evaluate_features(
    features: FeatureSet,
    boxes: dict[int, Box],
    image_size: tuple[int, int],
    protocol: EvalProtocol = EvalProtocol(),
) -> EvalReport:
    """Evaluate precomputed features against boxes keyed by sample id."""
    features.validate()
    missing = [sid for sid in features.ids if sid not in boxes]
    if missing:
        raise ValueError(f"boxes missing for ids: {missing[:5]}")
    per_sample = []
    order = np.argsort(features.ids, kind="stable")
    for row in order:
        sid = features.ids[row]
        a = features.audio[row]
        v = features.vision[row]
        sites = encoders.grid_to_sites(v)
        a_norm = np.linalg.norm(a)
        v_norms = np.linalg.norm(sites, axis=1)
        denom = a_norm * np.where(v_norms > 0, v_norms, 1.0)
        alpha = np.where(
            (a_norm > 0) & (v_norms > 0),
            sites @ a / np.where(denom > 0, denom, 1.0),
            0.0,
        ).reshape(v.shape[1], v.shape[2])
        pred = binarize_map(alpha, image_size, protocol.binarize_threshold)
        per_sample.append((sid, iou(pred, boxes[sid])))
    return _report(per_sample, protocol)


# ---------------------------------------------------------------------------
# sweeps and method comparison
# ---------------------------------------------------------------------------


def ablate_k(
    dataset: Sequence[SamplePair],
    config: TrainConfig,
    k_list: Sequence[int],
    stage1_params: EncoderParams | None = None,
    protocol: EvalProtocol = EvalProtocol(),
) -> list[tuple[int, float, float]]:
    """Full two-stage run per K from one shared stage-1 checkpoint."""
    if not k_list:
        raise ValueError("k_list must be nonempty")
    n = len(dataset)
    for k in k_list:
        if not 1 <= k <= n - 1:
            raise ValueError(f"K={k} outside 1..{n - 1}")
    if stage1_params is None:
        stage1_params, _ = trainer.train_stage1(dataset, config)
    rows = []
    for k in k_list:
        cfg_k = replace(config, k=k)
        final, _ = trainer.train_stage2(dataset, stage1_params, None, cfg_k)
        report = evaluate(final, dataset, protocol)
        rows.append((k, report.ciou, report.auc))
    return rows


def compare_methods(
    dataset: Sequence[SamplePair],
    config: TrainConfig,
    modes: Sequence[str] = ("vanilla", "random_hp", "hp"),
    stage1_params: EncoderParams | None = None,
    protocol: EvalProtocol = EvalProtocol(),
) -> list[tuple[str, float, float]]:
    """Train each mode from one shared stage-1 checkpoint with matched seeds."""
    if stage1_params is None:
        stage1_params, _ = trainer.train_stage1(dataset, config)
    rows = []
    for mode in modes:
        cfg_m = replace(config, mode=mode)
        final, _ = trainer.train_stage2(dataset, stage1_params, None, cfg_m)
        report = evaluate(final, dataset, protocol)
        rows.append((mode, report.ciou, report.auc))
    return rows


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def save_report_csv(report: EvalReport, path: str | Path) -> None:
    """Per-sample `id,iou` rows plus a `ciou=...,auc=...` summary row."""
    lines = ["id,iou"]
    for sid, value in report.per_sample:
        lines.append(f"{sid},{value!r}")
    lines.append(f"ciou={report.ciou!r},auc={report.auc!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def save_sweep_csv(rows: Sequence[tuple[int, float, float]], path: str | Path) -> None:
    lines = ["K,ciou,auc"]
    for k, ciou, auc in rows:
        lines.append(f"{k},{ciou!r},{auc!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def save_compare_csv(
    rows: Sequence[tuple[str, float, float]], path: str | Path
) -> None:
    lines = ["mode,ciou,auc"]
    for mode, ciou, auc in rows:
        lines.append(f"{mode},{ciou!r},{auc!r}")
    Path(path).write_text("\n".join(lines) + "\n")
