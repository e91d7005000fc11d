"""Semantic neighbor mining: per-sample positive sets and complement negatives.

Given frozen per-sample feature vectors (audio, and spatially pooled
vision), each sample ranks all other samples by cosine similarity within
each modality and keeps the top K as its positive sets. Everything not
positive (and not the sample itself) forms its negative set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoders import VisionFeature


@dataclass
class PooledVisionVector:
    """Channel vector (c,): the spatial mean of a vision feature grid."""

    values: np.ndarray


@dataclass
class MiningIndex:
    """Positive and negative sets for every sample, 1-based ids.

    ``pos_audio[i-1]`` / ``pos_vision[i-1]`` are ranked id tuples of length
    min(k, n-1); ``neg[i-1]`` is the ascending complement.
    """

    pos_audio: tuple[tuple[int, ...], ...]
    pos_vision: tuple[tuple[int, ...], ...]
    neg: tuple[tuple[int, ...], ...]
    k: int
    n: int

    def audio_positives(self, i: int) -> tuple[int, ...]:
        return self.pos_audio[i - 1]

    def vision_positives(self, i: int) -> tuple[int, ...]:
        return self.pos_vision[i - 1]

    def negatives(self, i: int) -> tuple[int, ...]:
        return self.neg[i - 1]

    def validate(self) -> None:
        n = self.n
        if not (len(self.pos_audio) == len(self.pos_vision) == len(self.neg) == n):
            raise ValueError("index lists do not all have length n")
        expect = min(self.k, n - 1)
        universe = set(range(1, n + 1))
        for i in range(1, n + 1):
            pa, pv, ng = self.pos_audio[i - 1], self.pos_vision[i - 1], self.neg[i - 1]
            if len(pa) != expect or len(pv) != expect:
                raise ValueError(f"sample {i}: positive sets must have {expect} ids")
            if i in pa or i in pv or i in ng:
                raise ValueError(f"sample {i} contained in its own sets")
            if set(ng) != universe - set(pa) - set(pv) - {i}:
                raise ValueError(f"sample {i}: negatives are not the complement")


def pool_vision(feature: VisionFeature) -> PooledVisionVector:
    """Spatial average pooling, (c, h, w) -> (c,)."""
    return PooledVisionVector(values=feature.values.mean(axis=(1, 2)))


def pool_vision_batch(sites: np.ndarray) -> np.ndarray:
    """Site-major batch pooling, (n, h*w, c) -> (n, c)."""
    return sites.mean(axis=1)


def _normalize_rows(vectors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(vectors, axis=1)
    ok = norms > 0.0
    unit = np.where(ok[:, None], vectors / np.where(ok, norms, 1.0)[:, None], 0.0)
    return unit, ok


def similarity_scores(vectors: np.ndarray, i: int) -> np.ndarray:
    """Cosine similarities of sample i (1-based) against all n samples.

    Pairs involving a zero-norm vector score -inf so they rank last.
    """
    unit, ok = _normalize_rows(np.asarray(vectors, dtype=float))
    scores = unit @ unit[i - 1]
    scores[~ok] = -np.inf
    if not ok[i - 1]:
        scores[:] = -np.inf
    return scores


def top_k(scores: np.ndarray, i: int, k: int) -> tuple[int, ...]:
    """Ids of the min(k, n-1) best-scoring samples j != i.

    Descending by score, ties broken by ascending id.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = len(scores)
    ids = np.arange(1, n + 1)
    keep = ids != i
    ids = ids[keep]
    order = np.lexsort((ids, -scores[keep]))
    return tuple(int(j) for j in ids[order[: min(k, n - 1)]])


def build_index(
    audio_feats: np.ndarray, pooled_vision_feats: np.ndarray, k: int
) -> MiningIndex:
    """Mine positives per modality and collect complement negatives.

    ``audio_feats`` and ``pooled_vision_feats`` are (n, c) arrays over the
    same samples in id order.
    """
    audio_feats = np.asarray(audio_feats, dtype=float)
    pooled_vision_feats = np.asarray(pooled_vision_feats, dtype=float)
    n = audio_feats.shape[0]
    if pooled_vision_feats.shape[0] != n:
        raise ValueError("audio and vision feature counts disagree")
    if n < 3:
        raise ValueError(f"need at least 3 samples to mine, got {n}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    pos_audio, pos_vision, neg = [], [], []
    universe = set(range(1, n + 1))
    for i in range(1, n + 1):
        pa = top_k(similarity_scores(audio_feats, i), i, k)
        pv = top_k(similarity_scores(pooled_vision_feats, i), i, k)
        pos_audio.append(pa)
        pos_vision.append(pv)
        neg.append(tuple(sorted(universe - set(pa) - set(pv) - {i})))
    return MiningIndex(
        pos_audio=tuple(pos_audio),
        pos_vision=tuple(pos_vision),
        neg=tuple(neg),
        k=k,
        n=n,
    )


def random_index(n: int, k: int, seed: int) -> MiningIndex:
    """Positive sets drawn uniformly without replacement; the ablation baseline.

    Per sample, draws the audio positives then the vision positives from
    ``numpy.random.default_rng(seed)``.
    """
    if n < 3:
        raise ValueError(f"need at least 3 samples, got {n}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    size = min(k, n - 1)
    universe = set(range(1, n + 1))
    pos_audio, pos_vision, neg = [], [], []
    for i in range(1, n + 1):
        others = np.array([j for j in range(1, n + 1) if j != i])
        pa = tuple(int(j) for j in rng.choice(others, size=size, replace=False))
        pv = tuple(int(j) for j in rng.choice(others, size=size, replace=False))
        pos_audio.append(pa)
        pos_vision.append(pv)
        neg.append(tuple(sorted(universe - set(pa) - set(pv) - {i})))
    return MiningIndex(
        pos_audio=tuple(pos_audio),
        pos_vision=tuple(pos_vision),
        neg=tuple(neg),
        k=k,
        n=n,
    )


def mining_precision(
    index: MiningIndex, classes: Sequence[int], k: int | None = None
) -> float:
    """Fraction of mined positives that share the anchor's class.

    Counts over both modalities; ``classes[j-1]`` is the class of id j.
    ``k`` restricts each ranked list to its first k entries.
    """
    if len(classes) != index.n:
        raise ValueError(f"need {index.n} class labels, got {len(classes)}")
    if any(c is None for c in classes):
        raise ValueError("missing class labels")
    take = index.k if k is None else k
    matched = 0
    total = 0
    for i in range(1, index.n + 1):
        anchor = classes[i - 1]
        for ranked in (index.pos_audio[i - 1], index.pos_vision[i - 1]):
            head = ranked[: min(take, len(ranked))]
            matched += sum(1 for j in head if classes[j - 1] == anchor)
            total += len(head)
    return matched / total if total else 0.0


def save_index(index: MiningIndex, path: str | Path) -> None:
    """Write an index as CSV rows i,kind,j with kind in {PA, PV, N}."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["i", "kind", "j"])
        for i in range(1, index.n + 1):
            for j in index.pos_audio[i - 1]:
                writer.writerow([i, "PA", j])
            for j in index.pos_vision[i - 1]:
                writer.writerow([i, "PV", j])
            for j in index.neg[i - 1]:
                writer.writerow([i, "N", j])


def load_index(path: str | Path) -> MiningIndex:
    """Read an index CSV; k is recovered as the stored positive-list length."""
    pos_audio: dict[int, list[int]] = {}
    pos_vision: dict[int, list[int]] = {}
    neg: dict[int, list[int]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["i", "kind", "j"]:
            raise ValueError(f"bad index header: {header}")
        for row in reader:
            if not row:
                continue
            i, kind, j = int(row[0]), row[1], int(row[2])
            target = {"PA": pos_audio, "PV": pos_vision, "N": neg}.get(kind)
            if target is None:
                raise ValueError(f"unknown kind {kind!r} in index file")
            target.setdefault(i, []).append(j)
    n = max(pos_audio) if pos_audio else 0
    if sorted(pos_audio) != list(range(1, n + 1)):
        raise ValueError("index file does not cover ids 1..n")
    k = len(pos_audio[1])
    return MiningIndex(
        pos_audio=tuple(tuple(pos_audio[i]) for i in range(1, n + 1)),
        pos_vision=tuple(tuple(pos_vision.get(i, ())) for i in range(1, n + 1)),
        neg=tuple(tuple(neg.get(i, ())) for i in range(1, n + 1)),
        k=k,
        n=n,
    )
