"""Fold splitting and the inverse-imbalanced / balanced training-set builders."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ResamplingError",
    "FoldAssignment",
    "TrainingSet",
    "kfold_split",
    "transform_patch",
    "augment",
    "oversample",
    "subsample",
    "build_inverse_imbalanced",
    "build_balanced",
    "OVERSAMPLE_FACTOR",
]

OVERSAMPLE_FACTOR = 9


class ResamplingError(ValueError):
    pass


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    folds: np.ndarray  # fold index per candidate index

    def members(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def roles(self, test_fold: int) -> tuple[int, list[int]]:
        """Validation fold and training folds when ``test_fold`` is held out.

        The validation fold is the next one round-robin; the remaining
        ``k - 2`` folds train.
        """
        val = (test_fold + 1) % self.k
        return val, [f for f in range(self.k) if f not in (test_fold, val)]


@dataclass
class TrainingSet:
    patches: np.ndarray
    labels: np.ndarray
    declared_ratio: float | None
    # one row per patch: (candidate index, copy number, angle in degrees, scale)
    provenance: list[tuple[int, int, float, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def counts(self) -> tuple[int, int]:
        n1 = int(self.labels.sum())
        return len(self.labels) - n1, n1

    @property
    def achieved_ratio(self) -> float:
        n0, n1 = self.counts
        return n1 / n0 if n0 else math.inf

    def manifest(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["candidate_id", "label", "copy", "angle_deg", "scale"])
        for (cid, copy, angle, scale), label in zip(self.provenance, self.labels):
            w.writerow([cid, int(label), copy, repr(angle), repr(scale)])
        return buf.getvalue()


def kfold_split(labels: Sequence[int], k: int, rng: np.random.Generator) -> FoldAssignment:
    """Stratified assignment of candidate indices to ``k`` folds.

    Within each class members are shuffled and dealt round-robin; the dealing
    position carries over from class 0 to class 1 so total fold sizes also
    stay within one of each other.
    """
    if k < 2:
        raise ResamplingError(f"k must be >= 2, got {k}")
    labels = np.asarray(labels)
    folds = np.empty(len(labels), dtype=np.int64)
    pos = 0
    for cls, name in ((0, "non-nodule"), (1, "nodule")):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            raise ResamplingError(f"class {cls} ({name}) has {len(members)} members, fewer than k={k}")
        members = members[rng.permutation(len(members))]
        folds[members] = (pos + np.arange(len(members))) % k
        pos += len(members)
    return FoldAssignment(k, folds)


def transform_patch(patch: np.ndarray, angle_deg: float, scale: float) -> np.ndarray:
    """Rotate by ``angle_deg`` and scale by ``scale`` about the patch centre.

    Bilinear resampling; sample positions falling outside the patch are
    clamped to the border. Result is clipped back to [0, 1].
    """
    h, w = patch.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx,
                         indexing="ij")
    # inverse map: destination -> source
    src_r = (cos * rr + sin * cc) / scale + cy
    src_c = (-sin * rr + cos * cc) / scale + cx
    src_r = np.clip(src_r, 0.0, h - 1)
    src_c = np.clip(src_c, 0.0, w - 1)
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = (src_r - r0)[..., None]
    fc = (src_c - c0)[..., None]
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    out = ((1 - fr) * (1 - fc) * patch[r0, c0] + (1 - fr) * fc * patch[r0, c1]
           + fr * (1 - fc) * patch[r1, c0] + fr * fc * patch[r1, c1])
    return np.clip(out, 0.0, 1.0)


def augment(patch: np.ndarray, rng: np.random.Generator, scale_range=(0.9, 1.1)
            ) -> tuple[np.ndarray, float, float]:
    """Random rotation in [0, 360) degrees and scale in ``scale_range``.

    Returns ``(patch, angle_deg, scale)``.
    """
    angle = float(rng.uniform(0.0, 360.0))
    scale = float(rng.uniform(*scale_range))
    return transform_patch(patch, angle, scale), angle, scale


def oversample(patches: np.ndarray, factor: int, rng: np.random.Generator, scale_range=(0.9, 1.1)
               ) -> tuple[np.ndarray, list[tuple[int, int, float, float]]]:
    """Each input patch followed by ``factor - 1`` augmented copies.

    Returns the stacked patches and per-output ``(source index, copy, angle,
    scale)``; the original is copy 0 with angle 0 and scale 1.
    """
    if factor < 1:
        raise ResamplingError(f"factor must be >= 1, got {factor}")
    patches = np.asarray(patches, dtype=np.float64)
    out = np.empty((len(patches) * factor, *patches.shape[1:]))
    records = []
    for i, p in enumerate(patches):
        out[i * factor] = p
        records.append((i, 0, 0.0, 1.0))
        for copy in range(1, factor):
            out[i * factor + copy], angle, scale = augment(p, rng, scale_range)
            records.append((i, copy, angle, scale))
    return out, records


def subsample(n_items: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n`` items drawn uniformly without replacement, in original order."""
    if n < 0:
        raise ResamplingError(f"n must be >= 0, got {n}")
    if n >= n_items:
        return np.arange(n_items)
    return np.sort(rng.choice(n_items, size=n, replace=False))


def _assemble(patches, pos_idx, neg_idx, rng, factor, ratio, scale_range) -> TrainingSet:
    pos_patches, records = oversample(patches[pos_idx], factor, rng, scale_range)
    provenance = [(int(pos_idx[i]), copy, angle, scale) for i, copy, angle, scale in records]
    provenance += [(int(j), 0, 0.0, 1.0) for j in neg_idx]
    return TrainingSet(
        patches=np.concatenate([pos_patches, patches[neg_idx]]),
        labels=np.concatenate([np.ones(len(pos_patches), np.int64), np.zeros(len(neg_idx), np.int64)]),
        declared_ratio=ratio,
        provenance=provenance,
    )


def build_inverse_imbalanced(patches: np.ndarray, labels: np.ndarray, subsets: Sequence[np.ndarray],
                             ratio: float, per_subset: int | None, rng: np.random.Generator,
                             factor: int = OVERSAMPLE_FACTOR, scale_range=(0.9, 1.1)) -> TrainingSet:
    """Nodule-heavy training set from the candidate indices in ``subsets``.

    Nodules from every subset are oversampled ``factor`` times; non-nodules
    are subsampled to ``per_subset`` per subset.  When ``per_subset`` is None
    it is chosen so that ``factor * #nodules / (#subsets * per_subset)``
    is as close to ``ratio`` as possible.
    """
    if not ratio > 0:
        raise ResamplingError(f"ratio must be > 0, got {ratio}")
    subsets = [np.asarray(s, dtype=np.int64) for s in subsets]
    pos_idx = np.concatenate([s[labels[s] == 1] for s in subsets]) if subsets else np.array([], np.int64)
    if len(pos_idx) == 0:
        raise ResamplingError("no nodules in the training subsets")
    if per_subset is None:
        per_subset = max(1, round(factor * len(pos_idx) / (ratio * len(subsets))))
    neg_parts = []
    for s in subsets:
        neg = s[labels[s] == 0]
        neg_parts.append(neg[subsample(len(neg), per_subset, rng)])
    neg_idx = np.concatenate(neg_parts)
    if len(neg_idx) == 0:
        raise ResamplingError("no non-nodules left after subsampling")
    return _assemble(patches, pos_idx, neg_idx, rng, factor, float(ratio), scale_range)


def build_balanced(patches: np.ndarray, labels: np.ndarray, pool: np.ndarray, rng: np.random.Generator,
                   factor: int = OVERSAMPLE_FACTOR, scale_range=(0.9, 1.1)) -> TrainingSet:
    """Nodules oversampled ``factor`` times, non-nodules subsampled to match.

    If there are fewer non-nodules than oversampled nodules, all are kept.
    """
    pool = np.asarray(pool, dtype=np.int64)
    pos_idx = pool[labels[pool] == 1]
    neg_all = pool[labels[pool] == 0]
    if len(pos_idx) == 0 or len(neg_all) == 0:
        raise ResamplingError(f"balanced set needs both classes, got {len(pos_idx)} nodules "
                              f"and {len(neg_all)} non-nodules")
    neg_idx = neg_all[subsample(len(neg_all), factor * len(pos_idx), rng)]
    return _assemble(patches, pos_idx, neg_idx, rng, factor, 1.0, scale_range)
