"""Cascaded single-sided classifiers under k-fold cross-validation.

For each held-out test fold ``f`` the next fold (``f + 1 mod k``) validates
and the remaining folds train.  A gating stage

1. builds a nodule-heavy training set from the surviving candidates of the
   training folds,
2. trains a model selected by validation nodule accuracy,
3. scores the surviving validation and test candidates,
4. sets ``th = std(validation non-nodule scores) / divisor``, and
5. rejects test candidates with ``c(x) < th`` (their probability becomes 0).

The final stage trains a balanced model on the survivors (selected by overall
accuracy) and scores the surviving test candidates.  The baseline is the final
stage alone, applied to every candidate.

All randomness is drawn from streams keyed by ``(seed, purpose, stage,
fold)``, so results do not depend on the order or process in which folds run.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .classifier import (
    NODULE_ACCURACY,
    OVERALL_ACCURACY,
    ArchSpec,
    Hyper,
    init_model,
    model_to_bytes,
    predict_proba,
    train,
)
from .ingest import Dataset, extract_patches
from .resampling import FoldAssignment, build_balanced, build_inverse_imbalanced, kfold_split
from .rng import derive_seed, make_rng

__all__ = [
    "CascadeError",
    "StageConfig",
    "ExperimentData",
    "FoldRecord",
    "StageResult",
    "CascadeResult",
    "compute_threshold",
    "gate",
    "run_stage",
    "run_final_stage",
    "run_cascade",
    "run_baseline",
    "make_folds",
]

log = logging.getLogger(__name__)


class CascadeError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    ratio: float = 24.0
    per_subset: int | None = None
    divisor: float = 10.0

    def __post_init__(self):
        if not self.ratio > 0:
            raise ValueError(f"ratio must be > 0, got {self.ratio}")
        if not self.divisor > 0:
            raise ValueError(f"divisor must be > 0, got {self.divisor}")
        if self.per_subset is not None and self.per_subset < 1:
            raise ValueError(f"per_subset must be >= 1, got {self.per_subset}")


@dataclass
class ExperimentData:
    patches: np.ndarray
    labels: np.ndarray
    candidate_ids: np.ndarray
    scan_ids: list[str]
    scans: int

    @classmethod
    def from_dataset(cls, dataset: Dataset, patch_size: int, slabs: int = 3) -> "ExperimentData":
        return cls(
            patches=extract_patches(dataset, patch_size, slabs),
            labels=dataset.labels(),
            candidate_ids=np.array([c.id for c in dataset.candidates], dtype=np.int64),
            scan_ids=[c.scan_id for c in dataset.candidates],
            scans=dataset.scan_count,
        )

    def __len__(self) -> int:
        return len(self.labels)


def compute_threshold(nonnodule_probs: Sequence[float], divisor: float = 10.0) -> float:
    """Population standard deviation of the non-nodule scores divided by ``divisor``."""
    p = np.asarray(nonnodule_probs, dtype=np.float64)
    if p.size == 0:
        raise CascadeError("threshold needs at least one non-nodule probability")
    return float(p.std()) / divisor


def gate(indices: np.ndarray, probs: np.ndarray, th: float) -> tuple[np.ndarray, np.ndarray]:
    """Split candidates into ``(survivors, rejected)``: rejected iff ``c(x) < th``."""
    indices = np.asarray(indices)
    probs = np.asarray(probs)
    reject = probs < th
    return indices[~reject], indices[reject]


@dataclass
class FoldRecord:
    fold: int
    val_fold: int
    train_ids: np.ndarray      # candidate indices contributing to the training set
    val_ids: np.ndarray
    test_ids: np.ndarray
    test_probs: np.ndarray
    val_probs: np.ndarray
    threshold: float
    sigma: float
    survivors: np.ndarray
    rejected: np.ndarray
    log: list[dict]
    model: bytes
    train_counts: tuple[int, int]
    input_counts: tuple[int, int] = (0, 0)
    survivor_counts: tuple[int, int] = (0, 0)
    rejected_counts: tuple[int, int] = (0, 0)


@dataclass
class StageResult:
    index: int
    config: StageConfig | None
    input_ids: np.ndarray
    survivors: np.ndarray
    rejected: np.ndarray
    scores: np.ndarray          # c(x) per candidate; NaN where not scored at this stage
    folds: list[FoldRecord]

    @property
    def thresholds(self) -> list[float]:
        return [r.threshold for r in self.folds]

    @property
    def scored_ids(self) -> np.ndarray:
        return np.flatnonzero(~np.isnan(self.scores))


@dataclass
class CascadeResult:
    mode: str
    stages: list[StageResult]
    final: StageResult
    probabilities: np.ndarray
    labels: np.ndarray
    candidate_ids: np.ndarray
    scan_ids: list[str]
    scans: int
    folds: FoldAssignment
    seed: int
    config: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# per-fold work (runs in worker processes when jobs > 1)

_DATA: ExperimentData | None = None


def _set_data(data: ExperimentData) -> None:
    global _DATA
    _DATA = data


def _counts(labels: np.ndarray, ids: np.ndarray) -> tuple[int, int]:
    lab = labels[ids]
    return int((lab == 0).sum()), int((lab == 1).sum())


def _fold_task(task: dict) -> dict:
    data = _DATA
    labels = data.labels
    seed, stage, fold = task["seed"], task["stage"], task["fold"]
    key = ("final", fold) if stage is None else ("stage", stage, "fold", fold)
    train_subsets = task["train_subsets"]
    with threadpool_limits(limits=1):
        resample_rng = make_rng(seed, *key, "resample")
        if stage is None:
            ts = build_balanced(data.patches, labels, np.concatenate(train_subsets), resample_rng)
            criterion = OVERALL_ACCURACY
        else:
            cfg: StageConfig = task["config"]
            ts = build_inverse_imbalanced(data.patches, labels, train_subsets, cfg.ratio, cfg.per_subset,
                                          resample_rng)
            criterion = NODULE_ACCURACY
        model = init_model(task["arch"], derive_seed(seed, *key, "init"))
        val_ids, test_ids = task["val_ids"], task["test_ids"]
        train(model, ts.patches, ts.labels, data.patches[val_ids], labels[val_ids], criterion,
              task["hyper"], make_rng(seed, *key, "train"))
        test_probs = predict_proba(model, data.patches[test_ids])
        val_probs = predict_proba(model, data.patches[val_ids]) if stage is not None else None
    return {
        "train_ids": np.unique([p[0] for p in ts.provenance]),
        "train_counts": ts.counts,
        "test_probs": test_probs,
        "val_probs": val_probs,
        "log": model.log,
        "model": model_to_bytes(model),
    }


def _map(tasks: list[dict], data: ExperimentData, jobs: int) -> list[dict]:
    if jobs <= 1 or len(tasks) <= 1:
        _set_data(data)
        return [_fold_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks)), initializer=_set_data,
                             initargs=(data,)) as pool:
        return list(pool.map(_fold_task, tasks))


def _split_roles(folds: FoldAssignment, pool: np.ndarray, test_fold: int):
    val_fold, train_folds = folds.roles(test_fold)
    in_pool = np.zeros(len(folds.folds), bool)
    in_pool[pool] = True
    members = lambda f: np.flatnonzero(in_pool & (folds.folds == f))  # noqa: E731
    return val_fold, [members(f) for f in train_folds], members(val_fold), members(test_fold)


def run_stage(index: int, cfg: StageConfig, folds: FoldAssignment, survivors: np.ndarray,
              data: ExperimentData, arch: ArchSpec, hyper: Hyper, seed: int, jobs: int = 1
              ) -> StageResult:
    """One single-sided gating stage over every fold."""
    survivors = np.sort(np.asarray(survivors, dtype=np.int64))
    labels = data.labels
    tasks, roles = [], []
    for f in range(folds.k):
        val_fold, train_subsets, val_ids, test_ids = _split_roles(folds, survivors, f)
        if not any((labels[s] == 1).any() for s in train_subsets):
            raise CascadeError(f"stage {index}, fold {f}: no surviving nodules in the training folds")
        if not (labels[val_ids] == 1).any():
            raise CascadeError(f"stage {index}, fold {f}: no surviving nodules in validation fold {val_fold}")
        if not (labels[val_ids] == 0).any():
            raise CascadeError(f"stage {index}, fold {f}: no surviving non-nodules in validation fold "
                               f"{val_fold} to set the threshold")
        roles.append((val_fold, val_ids, test_ids))
        tasks.append({"seed": seed, "stage": index, "fold": f, "config": cfg, "arch": arch,
                      "hyper": hyper, "train_subsets": train_subsets, "val_ids": val_ids,
                      "test_ids": test_ids})
    scores = np.full(len(data), np.nan)
    records = []
    all_surv, all_rej = [], []
    for f, ((val_fold, val_ids, test_ids), out) in enumerate(zip(roles, _map(tasks, data, jobs))):
        val_neg = out["val_probs"][labels[val_ids] == 0]
        sigma = float(np.asarray(val_neg).std())
        th = compute_threshold(val_neg, cfg.divisor)
        surv, rej = gate(test_ids, out["test_probs"], th)
        scores[test_ids] = out["test_probs"]
        all_surv.append(surv)
        all_rej.append(rej)
        records.append(FoldRecord(
            fold=f, val_fold=val_fold, train_ids=out["train_ids"], val_ids=val_ids, test_ids=test_ids,
            test_probs=out["test_probs"], val_probs=out["val_probs"], threshold=th, sigma=sigma,
            survivors=surv, rejected=rej, log=out["log"], model=out["model"],
            train_counts=out["train_counts"], input_counts=_counts(labels, test_ids),
            survivor_counts=_counts(labels, surv), rejected_counts=_counts(labels, rej)))
        log.info("stage %d fold %d: th=%.4g rejected %d/%d", index, f, th, len(rej), len(test_ids))
    return StageResult(index, cfg, survivors, np.sort(np.concatenate(all_surv)),
                       np.sort(np.concatenate(all_rej)), scores, records)


def run_final_stage(folds: FoldAssignment, survivors: np.ndarray, data: ExperimentData, arch: ArchSpec,
                    hyper: Hyper, seed: int, jobs: int = 1, index: int = 0) -> StageResult:
    """Balanced-model scoring of the surviving candidates (nothing is rejected)."""
    survivors = np.sort(np.asarray(survivors, dtype=np.int64))
    labels = data.labels
    tasks, roles = [], []
    for f in range(folds.k):
        val_fold, train_subsets, val_ids, test_ids = _split_roles(folds, survivors, f)
        pool = np.concatenate(train_subsets)
        if not (labels[pool] == 1).any() or not (labels[pool] == 0).any():
            raise CascadeError(f"final stage, fold {f}: balanced training needs both classes among survivors")
        if len(val_ids) == 0:
            raise CascadeError(f"final stage, fold {f}: empty validation fold {val_fold}")
        roles.append((val_fold, val_ids, test_ids))
        tasks.append({"seed": seed, "stage": None, "fold": f, "arch": arch, "hyper": hyper,
                      "train_subsets": train_subsets, "val_ids": val_ids, "test_ids": test_ids})
    scores = np.full(len(data), np.nan)
    records = []
    for f, ((val_fold, val_ids, test_ids), out) in enumerate(zip(roles, _map(tasks, data, jobs))):
        scores[test_ids] = out["test_probs"]
        records.append(FoldRecord(
            fold=f, val_fold=val_fold, train_ids=out["train_ids"], val_ids=val_ids, test_ids=test_ids,
            test_probs=out["test_probs"], val_probs=np.array([]), threshold=0.0, sigma=math.nan,
            survivors=test_ids, rejected=np.array([], np.int64), log=out["log"], model=out["model"],
            train_counts=out["train_counts"], input_counts=_counts(labels, test_ids),
            survivor_counts=_counts(labels, test_ids), rejected_counts=(0, 0)))
    return StageResult(index, None, survivors, survivors, np.array([], np.int64), scores, records)


def _assemble(mode, stages, final, data, folds, seed, config) -> CascadeResult:
    probs = np.zeros(len(data))
    scored = final.scored_ids
    probs[scored] = final.scores[scored]
    return CascadeResult(mode, stages, final, probs, data.labels, data.candidate_ids, data.scan_ids,
                         data.scans, folds, seed, config)


def make_folds(data: ExperimentData, k: int, seed: int) -> FoldAssignment:
    return kfold_split(data.labels, k, make_rng(seed, "folds"))


def run_cascade(data: ExperimentData, stage_cfgs: Sequence[StageConfig], arch: ArchSpec, hyper: Hyper,
                k: int = 10, seed: int = 0, jobs: int = 1) -> CascadeResult:
    """Gating stages in sequence on shrinking survivor sets, then balanced final scoring."""
    if len(stage_cfgs) < 1:
        raise CascadeError("a cascade needs at least one gating stage")
    folds = make_folds(data, k, seed)
    survivors = np.arange(len(data))
    stages = []
    for i, cfg in enumerate(stage_cfgs, start=1):
        try:
            stage = run_stage(i, cfg, folds, survivors, data, arch, hyper, seed, jobs)
        except CascadeError:
            raise
        except Exception as exc:
            raise CascadeError(f"stage {i}: {exc}") from exc
        stages.append(stage)
        survivors = stage.survivors
    final = run_final_stage(folds, survivors, data, arch, hyper, seed, jobs, index=len(stages) + 1)
    config = {"k": k, "stages": [vars(c) for c in stage_cfgs], "arch": arch.to_dict(), "hyper": vars(hyper)}
    return _assemble("cascade", stages, final, data, folds, seed, config)


def run_baseline(data: ExperimentData, arch: ArchSpec, hyper: Hyper, k: int = 10, seed: int = 0,
                 jobs: int = 1) -> CascadeResult:
    """Balanced single model per fold, scoring every held-out candidate."""
    if len(data) == 0:
        raise CascadeError("empty dataset")
    folds = make_folds(data, k, seed)
    final = run_final_stage(folds, np.arange(len(data)), data, arch, hyper, seed, jobs, index=1)
    config = {"k": k, "stages": [], "arch": arch.to_dict(), "hyper": vars(hyper)}
    return _assemble("baseline", [], final, data, folds, seed, config)
