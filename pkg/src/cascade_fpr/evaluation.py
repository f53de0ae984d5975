"""FROC analysis, score histograms, per-stage reduction series and report files."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "EvaluationError",
    "FrocCurve",
    "Histogram",
    "ReductionSeries",
    "froc",
    "sensitivity_at",
    "average_sensitivity",
    "histogram",
    "reduction_series",
    "summarize",
    "fmt",
    "write_csv",
    "emit_report",
    "read_probability_table",
    "PROBABILITY_TABLE",
    "SUMMARY_FIELDS",
]

OPERATING_POINTS = (4.0, 8.0)
PROBABILITY_TABLE = "probabilities.csv"
SUMMARY_FIELDS = ("scans", "candidates", "nodules", "non_nodules",
                  "sensitivity_at_4", "sensitivity_at_8", "average_sensitivity")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class FrocCurve:
    fp_per_scan: np.ndarray
    sensitivity: np.ndarray
    thresholds: np.ndarray
    scans: int
    nodules: int

    @classmethod
    def from_points(cls, points: Sequence[tuple[float, float]], scans: int = 1, nodules: int = 1
                    ) -> "FrocCurve":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return cls(pts[:, 0], pts[:, 1], np.full(len(pts), np.nan), scans, nodules)

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fp_per_scan.tolist(), self.sensitivity.tolist()))

    def __len__(self) -> int:
        return len(self.fp_per_scan)


def froc(probabilities: Sequence[float], labels: Sequence[int], scans: int) -> FrocCurve:
    """FROC operating points over every distinct positive probability.

    A candidate is called positive at threshold ``t`` iff its probability is
    ``>= t``.  Thresholds sweep the distinct observed values ``> 0`` in
    descending order, so candidates with probability exactly 0 are never
    counted.  With no positive probabilities the curve is the single point
    ``(0, 0)``.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if scans <= 0:
        raise EvaluationError(f"scan count must be > 0, got {scans}")
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise EvaluationError("FROC needs at least one nodule")
    keep = p > 0
    p, y = p[keep], y[keep]
    if len(p) == 0:
        return FrocCurve(np.zeros(1), np.zeros(1), np.array([np.nan]), scans, n_pos)
    order = np.argsort(-p, kind="stable")
    p, y = p[order], y[order]
    tp = np.cumsum(y == 1)
    fp = np.cumsum(y == 0)
    # last index of each run of equal probabilities
    ends = np.flatnonzero(np.append(p[1:] != p[:-1], True))
    fps = fp[ends] / scans
    sens = tp[ends] / n_pos
    thr = p[ends]
    dedup = np.ones(len(ends), bool)
    dedup[1:] = (fps[1:] != fps[:-1]) | (sens[1:] != sens[:-1])
    return FrocCurve(fps[dedup], sens[dedup], thr[dedup], scans, n_pos)


def sensitivity_at(curve: FrocCurve, fp_per_scan: float) -> float:
    """Sensitivity read off the piecewise-linear curve at ``fp_per_scan``.

    Where several points share an FP rate (a vertical step) the highest
    sensitivity there is used; queries outside the curve's FP range take the
    nearest end point.
    """
    if len(curve) == 0:
        raise EvaluationError("empty FROC curve")
    if fp_per_scan < 0:
        raise EvaluationError(f"fp_per_scan must be >= 0, got {fp_per_scan}")
    x, s = curve.fp_per_scan, curve.sensitivity
    j = int(np.searchsorted(x, fp_per_scan, side="right"))
    if j == 0:
        return float(s[0])
    i = j - 1
    if j == len(x) or x[i] == fp_per_scan:
        return float(s[i])
    frac = (fp_per_scan - x[i]) / (x[j] - x[i])
    return float(s[i] + frac * (s[j] - s[i]))


def average_sensitivity(curve: FrocCurve, points: Sequence[float] = OPERATING_POINTS) -> float:
    """Mean sensitivity at 4 and 8 false positives per scan."""
    return sum(sensitivity_at(curve, q) for q in points) / len(points)


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: dict[int, np.ndarray]


def histogram(probabilities: Sequence[float], labels: Sequence[int], bins: int = 50) -> Histogram:
    """Per-class counts over ``bins`` uniform bins on [0, 1]; the last bin is closed."""
    if bins < 1:
        raise EvaluationError(f"bins must be >= 1, got {bins}")
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.searchsorted(edges, p, side="right") - 1, 0, bins - 1)
    return Histogram(edges, {c: np.bincount(idx[y == c], minlength=bins) for c in (0, 1)})


@dataclass(frozen=True)
class ReductionSeries:
    # rows of (stage, class, survivors, original, fraction)
    rows: list[tuple[int, int, int, int, float]]

    def fraction(self, stage: int, cls: int) -> float:
        for st, c, _, _, frac in self.rows:
            if st == stage and c == cls:
                return frac
        raise KeyError((stage, cls))


def reduction_series(result) -> ReductionSeries:
    """Surviving fraction of each class's original candidates after every stage."""
    labels = np.asarray(result.labels)
    original = {c: int((labels == c).sum()) for c in (0, 1)}
    rows = []
    for stage in result.stages:
        surv = labels[stage.survivors]
        for c in (0, 1):
            n = int((surv == c).sum())
            rows.append((stage.index, c, n, original[c], n / original[c] if original[c] else 0.0))
    return ReductionSeries(rows)


# --------------------------------------------------------------------------
# reports


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(value).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6g}"
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def summarize(probabilities, labels, scans: int) -> tuple[dict, FrocCurve]:
    labels = np.asarray(labels)
    curve = froc(probabilities, labels, scans)
    s4, s8 = (sensitivity_at(curve, q) for q in OPERATING_POINTS)
    summary = {
        "scans": int(scans),
        "candidates": int(len(labels)),
        "nodules": int((labels == 1).sum()),
        "non_nodules": int((labels == 0).sum()),
        "sensitivity_at_4": s4,
        "sensitivity_at_8": s8,
        "average_sensitivity": (s4 + s8) / 2,
    }
    return summary, curve


def _write_histogram(path: Path, hist: Histogram) -> None:
    rows = [(hist.edges[i], hist.edges[i + 1], hist.counts[0][i], hist.counts[1][i])
            for i in range(len(hist.edges) - 1)]
    write_csv(path, ["bin_lo", "bin_hi", "count_class0", "count_class1"], rows)


def write_probability_table(path: Path, candidate_ids, scan_ids, labels, probabilities) -> None:
    # probabilities use round-trip precision so re-evaluation reproduces the run exactly
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["candidate_id", "scan_id", "label", "probability"])
    for cid, sid, lab, p in zip(candidate_ids, scan_ids, labels, probabilities):
        w.writerow([int(cid), sid, int(lab), repr(float(p))])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_probability_table(path: str | Path):
    """Parse a probability table; returns ``(candidate_ids, scan_ids, labels, probabilities)``."""
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["candidate_id", "scan_id", "label", "probability"]:
        raise EvaluationError("row 1: expected header candidate_id,scan_id,label,probability")
    ids, scans, labels, probs = [], [], [], []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise EvaluationError(f"row {n}: expected 4 fields, got {len(row)}")
        try:
            cid, lab, p = int(row[0]), int(row[2]), float(row[3])
        except ValueError:
            raise EvaluationError(f"row {n}: non-numeric field") from None
        if lab not in (0, 1):
            raise EvaluationError(f"row {n}: label must be 0 or 1")
        if not 0.0 <= p <= 1.0:
            raise EvaluationError(f"row {n}: probability outside [0, 1]")
        ids.append(cid)
        scans.append(row[1])
        labels.append(lab)
        probs.append(p)
    if not ids:
        raise EvaluationError("probability table has no rows")
    return np.array(ids), scans, np.array(labels), np.array(probs)


def emit_evaluation(out: Path, candidate_ids, scan_ids, labels, probabilities, scans: int,
                    bins: int = 50) -> dict:
    """Probability table, FROC points, final histogram and summary files."""
    out.mkdir(parents=True, exist_ok=True)
    write_probability_table(out / PROBABILITY_TABLE, candidate_ids, scan_ids, labels, probabilities)
    summary, curve = summarize(probabilities, labels, scans)
    write_csv(out / "froc.csv", ["fp_per_scan", "sensitivity", "threshold"],
              zip(curve.fp_per_scan, curve.sensitivity, curve.thresholds))
    _write_histogram(out / "histogram.csv", histogram(probabilities, labels, bins))
    write_csv(out / "summary.csv", ["field", "value"], [(k, summary[k]) for k in SUMMARY_FIELDS])
    rounded = {k: (float(fmt(v)) if isinstance(v, float) else v) for k, v in summary.items()}
    (out / "summary.json").write_text(json.dumps(rounded, indent=2) + "\n", encoding="utf-8")
    return summary


def emit_report(result, out_dir: str | Path, bins: int = 50) -> dict:
    """Write every report file for a cascade or baseline result; returns the summary."""
    out = Path(out_dir)
    summary = emit_evaluation(out, result.candidate_ids, result.scan_ids, result.labels,
                              result.probabilities, result.scans, bins)
    series = reduction_series(result)
    write_csv(out / "reduction.csv", ["stage", "class", "survivors", "original", "surviving_fraction"],
              series.rows)
    stage_rows = []
    for stage in result.stages:
        for rec in stage.folds:
            stage_rows.append((stage.index, rec.fold, rec.threshold, rec.sigma, *rec.input_counts,
                               *rec.survivor_counts, *rec.rejected_counts))
        scored = stage.scored_ids
        _write_histogram(out / f"histogram_stage{stage.index}.csv",
                         histogram(stage.scores[scored], result.labels[scored], bins))
    write_csv(out / "stages.csv",
              ["stage", "fold", "threshold", "sigma", "input_class0", "input_class1",
               "survivors_class0", "survivors_class1", "rejected_class0", "rejected_class1"],
              stage_rows)
    return summary
