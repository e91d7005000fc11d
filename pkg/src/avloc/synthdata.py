"""Synthetic audio-visual datasets with known semantics, plus file I/O.

A sample pairs a 3xHxW image with a 1xHaxWa toy "spectrogram" grid and a
latent class. The image holds a square object whose color is a fixed
per-class signature, placed at a position drawn independently of the
class; the audio grid is a fixed per-class template. Both get i.i.d.
Gaussian noise on top. Because the templates are mutually orthogonal
cosine patterns, classes stay separable even under untrained linear
encoders, while object position remains uninformative about the class.

The module also defines the on-disk formats: a line-based feature file
(``AVF1``), a raw dataset container (``AVR1``) and the boxes/classes CSVs.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

Box = tuple[int, int, int, int]

RAW_FILE = "data.avr"
BOXES_FILE = "boxes.csv"
CLASSES_FILE = "classes.csv"


class DatasetFileError(ValueError):
    """Base class for dataset / feature file problems."""


class MalformedHeaderError(DatasetFileError):
    """Header line missing, wrong magic, or non-positive dimensions."""


class ShapeMismatchError(DatasetFileError):
    """A record does not match the shape the header promised."""


class TruncatedPayloadError(DatasetFileError):
    """File ends before all promised records were read."""


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings for one synthetic dataset."""

    n_samples: int = 200
    n_classes: int = 10
    image_size: tuple[int, int] = (32, 32)
    audio_size: tuple[int, int] = (8, 16)
    object_size: int = 16
    noise_std: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        hv, wv = self.image_size
        ha, wa = self.audio_size
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if min(hv, wv, ha, wa) < 1:
            raise ValueError("image and audio dimensions must be positive")
        if not 1 <= self.object_size <= min(hv, wv):
            raise ValueError(
                f"object_size {self.object_size} does not fit a {hv}x{wv} image"
            )
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        # Cosine templates alias above half the grid cell count, which would
        # make two classes identical.
        if self.n_classes > (ha * wa) // 2 - 1:
            raise ValueError(
                f"n_classes {self.n_classes} too large for a {ha}x{wa} audio grid"
            )


@dataclass
class SamplePair:
    """One audio-visual clip: image grid, audio grid, optional annotations.

    ``gt_box`` is (x0, y0, x1, y1) in image pixels, inclusive-exclusive.
    """

    id: int
    image: np.ndarray
    audio: np.ndarray
    latent_class: int | None = None
    gt_box: Box | None = None

    def validate(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be 3xHxW, got {self.image.shape}")
        if self.audio.ndim != 3 or self.audio.shape[0] != 1:
            raise ValueError(f"audio must be 1xHaxWa, got {self.audio.shape}")
        if self.gt_box is not None:
            x0, y0, x1, y1 = self.gt_box
            _, hv, wv = self.image.shape
            if not (0 <= x0 < x1 <= wv and 0 <= y0 < y1 <= hv):
                raise ValueError(f"gt_box {self.gt_box} outside {hv}x{wv} image")


def class_color(latent_class: int, n_classes: int) -> np.ndarray:
    """Fixed 3-vector color signature for a class (1-based)."""
    theta = 2.0 * math.pi * (latent_class - 1) / n_classes
    return np.array([math.cos(theta), math.sin(theta), math.cos(2.0 * theta)])


def class_template(latent_class: int, audio_size: tuple[int, int]) -> np.ndarray:
    """Fixed audio template for a class: one cosine frequency over the grid.

    Templates of distinct classes are exactly orthogonal while the class
    index stays below half the number of grid cells.
    """
    ha, wa = audio_size
    cells = ha * wa
    ramp = np.arange(cells, dtype=float)
    wave = np.cos(2.0 * math.pi * latent_class * ramp / cells)
    return wave.reshape(1, ha, wa)


def generate(config: SynthConfig) -> list[SamplePair]:
    """Generate a dataset as a pure function of the config (seed included).

    Per sample, draws from ``numpy.random.default_rng(seed)`` in this fixed
    order: latent class (uniform on 1..C), object row offset, object column
    offset, image noise (3xHxW normal draws), audio noise (1xHaxWa normal
    draws). Noise is drawn even when ``noise_std`` is zero so the stream
    layout does not depend on it.
    """
    config.validate()
    hv, wv = config.image_size
    ha, wa = config.audio_size
    obj = config.object_size
    rng = np.random.default_rng(config.seed)
    samples = []
    for i in range(1, config.n_samples + 1):
        z = int(rng.integers(1, config.n_classes + 1))
        y0 = int(rng.integers(0, hv - obj + 1))
        x0 = int(rng.integers(0, wv - obj + 1))
        image = rng.normal(0.0, config.noise_std, size=(3, hv, wv))
        audio = rng.normal(0.0, config.noise_std, size=(1, ha, wa))
        image[:, y0 : y0 + obj, x0 : x0 + obj] += class_color(
            z, config.n_classes
        )[:, None, None]
        audio += class_template(z, config.audio_size)
        samples.append(
            SamplePair(
                id=i,
                image=image,
                audio=audio,
                latent_class=z,
                gt_box=(x0, y0, x0 + obj, y0 + obj),
            )
        )
    return samples


# ---------------------------------------------------------------------------
# feature files (AVF1)
# ---------------------------------------------------------------------------


@dataclass
class FeatureSet:
    """Per-sample audio vectors (n, c) and vision grids (n, c, h, w)."""

    ids: tuple[int, ...]
    audio: np.ndarray
    vision: np.ndarray

    def validate(self) -> None:
        n = len(self.ids)
        if self.audio.shape[0] != n or self.vision.shape[0] != n:
            raise ShapeMismatchError("ids, audio and vision lengths disagree")
        if self.audio.ndim != 2 or self.vision.ndim != 4:
            raise ShapeMismatchError(
                f"expected (n,c) audio and (n,c,h,w) vision, got "
                f"{self.audio.shape} and {self.vision.shape}"
            )
        if self.audio.shape[1] != self.vision.shape[1]:
            raise ShapeMismatchError("audio and vision channel counts disagree")


def _fmt(values: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in values)


def _parse_record(line: str, tag: str, expect: int) -> tuple[int, np.ndarray]:
    parts = line.split()
    if len(parts) < 2 or parts[0] != tag:
        raise ShapeMismatchError(f"expected a '{tag} <id>' record, got: {line[:40]!r}")
    try:
        rid = int(parts[1])
        values = np.array([float(tok) for tok in parts[2:]])
    except ValueError as exc:
        raise ShapeMismatchError(f"bad {tag} record payload: {exc}") from exc
    if values.size != expect:
        raise ShapeMismatchError(
            f"{tag} record {rid} has {values.size} values, expected {expect}"
        )
    return rid, values


def _parse_header(line: str, magic: str, n_dims: int) -> tuple[int, ...]:
    parts = line.split()
    if not parts or parts[0] != magic:
        raise MalformedHeaderError(f"missing {magic} magic in header: {line[:40]!r}")
    if len(parts) != 1 + n_dims:
        raise MalformedHeaderError(f"header needs {n_dims} dimensions: {line[:40]!r}")
    try:
        dims = tuple(int(tok) for tok in parts[1:])
    except ValueError as exc:
        raise MalformedHeaderError(f"non-integer header field: {exc}") from exc
    if dims[0] < 0 or any(d < 1 for d in dims[1:]):
        raise MalformedHeaderError(f"non-positive dimension in header: {dims}")
    return dims


def save_features(features: FeatureSet, path: str | Path) -> None:
    """Write an AVF1 feature file; ``load_features`` restores it bit-exactly."""
    features.validate()
    n, c = features.audio.shape
    _, _, h, w = features.vision.shape
    lines = [f"AVF1 {n} {c} {h} {w}"]
    for row, sid in enumerate(features.ids):
        lines.append(f"A {sid} " + _fmt(features.audio[row]))
        lines.append(f"V {sid} " + _fmt(features.vision[row].ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_features(path: str | Path) -> FeatureSet:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MalformedHeaderError(f"empty feature file: {path}")
    n, c, h, w = _parse_header(lines[0], "AVF1", 4)
    if len(lines) < 1 + 2 * n:
        raise TruncatedPayloadError(
            f"header promises {n} samples ({2 * n} records), found {len(lines) - 1}"
        )
    if len(lines) > 1 + 2 * n:
        raise ShapeMismatchError("trailing content after the last promised record")
    ids = []
    audio = np.zeros((n, c))
    vision = np.zeros((n, c, h, w))
    for row in range(n):
        aid, avals = _parse_record(lines[1 + 2 * row], "A", c)
        vid, vvals = _parse_record(lines[2 + 2 * row], "V", c * h * w)
        if aid != vid:
            raise ShapeMismatchError(f"A record {aid} paired with V record {vid}")
        ids.append(aid)
        audio[row] = avals
        vision[row] = vvals.reshape(c, h, w)
    return FeatureSet(ids=tuple(ids), audio=audio, vision=vision)


# ---------------------------------------------------------------------------
# raw dataset dumps (AVR1 + boxes.csv + classes.csv)
# ---------------------------------------------------------------------------


def save_dataset(samples: list[SamplePair], out_dir: str | Path) -> None:
    """Dump raw samples to ``data.avr`` plus boxes and classes CSVs.

    The AVR1 container reuses the AVF1 line grammar but stores raw grids:
    header ``AVR1 <n> <H_v> <W_v> <H_a> <W_a>``, then per sample an ``A``
    record with the flattened audio grid and a ``V`` record with the
    flattened 3-channel image.
    """
    if not samples:
        raise ValueError("cannot save an empty dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, hv, wv = samples[0].image.shape
    _, ha, wa = samples[0].audio.shape
    lines = [f"AVR1 {len(samples)} {hv} {wv} {ha} {wa}"]
    for s in samples:
        if s.image.shape != (3, hv, wv) or s.audio.shape != (1, ha, wa):
            raise ShapeMismatchError(f"sample {s.id} has inconsistent shapes")
        lines.append(f"A {s.id} " + _fmt(s.audio.ravel()))
        lines.append(f"V {s.id} " + _fmt(s.image.ravel()))
    (out / RAW_FILE).write_text("\n".join(lines) + "\n")

    with open(out / BOXES_FILE, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x0", "y0", "x1", "y1"])
        for s in samples:
            if s.gt_box is not None:
                writer.writerow([s.id, *s.gt_box])
    with open(out / CLASSES_FILE, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "class"])
        for s in samples:
            if s.latent_class is not None:
                writer.writerow([s.id, s.latent_class])


def load_dataset(in_dir: str | Path) -> list[SamplePair]:
    """Load a raw dataset dump written by :func:`save_dataset`."""
    src = Path(in_dir)
    text = (src / RAW_FILE).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise MalformedHeaderError(f"empty dataset file: {src / RAW_FILE}")
    n, hv, wv, ha, wa = _parse_header(lines[0], "AVR1", 5)
    if len(lines) < 1 + 2 * n:
        raise TruncatedPayloadError(
            f"header promises {n} samples ({2 * n} records), found {len(lines) - 1}"
        )
    if len(lines) > 1 + 2 * n:
        raise ShapeMismatchError("trailing content after the last promised record")
    boxes = _load_boxes(src / BOXES_FILE) if (src / BOXES_FILE).exists() else {}
    classes = _load_classes(src / CLASSES_FILE) if (src / CLASSES_FILE).exists() else {}
    samples = []
    for row in range(n):
        aid, avals = _parse_record(lines[1 + 2 * row], "A", ha * wa)
        vid, vvals = _parse_record(lines[2 + 2 * row], "V", 3 * hv * wv)
        if aid != vid:
            raise ShapeMismatchError(f"A record {aid} paired with V record {vid}")
        samples.append(
            SamplePair(
                id=aid,
                image=vvals.reshape(3, hv, wv),
                audio=avals.reshape(1, ha, wa),
                latent_class=classes.get(aid),
                gt_box=boxes.get(aid),
            )
        )
    return samples


def _load_boxes(path: Path) -> dict[int, Box]:
    boxes: dict[int, Box] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "x0", "y0", "x1", "y1"]:
            raise MalformedHeaderError(f"bad boxes header: {header}")
        for row in reader:
            if not row:
                continue
            sid, x0, y0, x1, y1 = (int(v) for v in row)
            boxes[sid] = (x0, y0, x1, y1)
    return boxes


def _load_classes(path: Path) -> dict[int, int]:
    classes: dict[int, int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "class"]:
            raise MalformedHeaderError(f"bad classes header: {header}")
        for row in reader:
            if not row:
                continue
            classes[int(row[0])] = int(row[1])
    return classes
