import math

import numpy as np
import pytest

from cascade_fpr.cascade import (
    CascadeError,
    ExperimentData,
    StageConfig,
    compute_threshold,
    gate,
    make_folds,
    run_baseline,
    run_cascade,
    run_stage,
)
from cascade_fpr.classifier import ArchSpec, Hyper
from cascade_fpr.evaluation import SUMMARY_FIELDS, emit_report, reduction_series
from cascade_fpr.synth import SynthSpec, synthesize_dataset

from invariants import cascade_violations
from oracles import two_pass_std

ARCH = ArchSpec.standard(8, (4,), 8)
HYPER = Hyper(learning_rate=0.05, epochs=2)


@pytest.fixture(scope="module")
def data():
    spec = SynthSpec(n_positive=24, n_negative=300, volume_dims=(64, 64, 10), patch_size=8, cell_depth=5)
    return ExperimentData.from_dataset(synthesize_dataset(spec, 3), 8)


@pytest.fixture(scope="module")
def cascade(data):
    return run_cascade(data, [StageConfig(24.0)] * 3, ARCH, HYPER, k=4, seed=11)


# threshold and gate ---------------------------------------------------------

def test_threshold_constant_scores():
    assert compute_threshold([0.3] * 7) == 0.0


def test_threshold_two_point():
    assert compute_threshold([0.0, 1.0] * 5) == pytest.approx(0.05, abs=1e-15)


def test_threshold_matches_two_pass():
    p = np.random.default_rng(2).random(1000)
    assert abs(compute_threshold(p) - two_pass_std(p) / 10) <= 1e-12
    assert abs(compute_threshold(p, 4.0) - two_pass_std(p) / 4) <= 1e-12


def test_threshold_empty():
    with pytest.raises(CascadeError):
        compute_threshold([])


def test_gate_cases():
    ids = np.arange(5)
    probs = np.array([0.0, 0.2, 0.5, 0.9, 1.0])
    surv, rej = gate(ids, probs, 0.0)
    assert len(rej) == 0 and surv.tolist() == ids.tolist()
    surv, rej = gate(ids, probs, 1.01)
    assert len(surv) == 0 and rej.tolist() == ids.tolist()


def test_gate_matches_filter():
    rng = np.random.default_rng(4)
    ids = rng.permutation(200)
    probs = rng.random(200)
    probs[::7] = 0.3  # exact ties with th
    surv, rej = gate(ids, probs, 0.3)
    assert rej.tolist() == [i for i, p in zip(ids, probs) if p < 0.3]
    assert surv.tolist() == [i for i, p in zip(ids, probs) if not p < 0.3]


def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig(ratio=0)
    with pytest.raises(ValueError):
        StageConfig(divisor=0)
    assert StageConfig(divisor=math.inf).divisor == math.inf


# full runs ------------------------------------------------------------------

def test_invariants_hold(cascade):
    assert cascade_violations(cascade) == []


def test_survivors_weakly_decrease(cascade):
    counts = [len(cascade.labels)] + [len(s.survivors) for s in cascade.stages]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_reduction_matches_recount(cascade):
    series = reduction_series(cascade)
    labels = cascade.labels
    for st in cascade.stages:
        for c in (0, 1):
            want = np.isin(np.flatnonzero(labels == c), st.survivors).sum() / (labels == c).sum()
            assert series.fraction(st.index, c) == want


def test_stage_deterministic(data):
    folds = make_folds(data, 4, 5)
    everyone = np.arange(len(data))
    a = run_stage(1, StageConfig(), folds, everyone, data, ARCH, HYPER, seed=5)
    b = run_stage(1, StageConfig(), folds, everyone, data, ARCH, HYPER, seed=5)
    np.testing.assert_array_equal(a.scores, b.scores)
    np.testing.assert_array_equal(a.survivors, b.survivors)
    assert a.thresholds == b.thresholds
    assert [r.model for r in a.folds] == [r.model for r in b.folds]


def test_parallel_folds_identical(data):
    a = run_cascade(data, [StageConfig()], ARCH, HYPER, k=4, seed=2, jobs=1)
    b = run_cascade(data, [StageConfig()], ARCH, HYPER, k=4, seed=2, jobs=3)
    np.testing.assert_array_equal(a.probabilities, b.probabilities)
    assert [r.model for r in a.final.folds] == [r.model for r in b.final.folds]


def test_single_stage_without_gate_equals_baseline(data):
    casc = run_cascade(data, [StageConfig(divisor=math.inf)], ARCH, HYPER, k=4, seed=9)
    base = run_baseline(data, ARCH, HYPER, k=4, seed=9)
    assert len(casc.stages[0].rejected) == 0
    np.testing.assert_array_equal(casc.probabilities, base.probabilities)


def test_baseline_probabilities_in_open_interval(data):
    base = run_baseline(data, ARCH, HYPER, k=4, seed=1)
    assert np.all((base.probabilities > 0) & (base.probabilities < 1))
    again = run_baseline(data, ARCH, HYPER, k=4, seed=1)
    np.testing.assert_array_equal(base.probabilities, again.probabilities)
    assert cascade_violations(base) == []


def test_baseline_on_separable_data():
    rng = np.random.default_rng(0)
    basis = np.random.default_rng(1).random((2, 8, 8, 3))
    labels = np.array([1] * 40 + [0] * 200)
    a = rng.uniform(0.6, 1.0, len(labels))
    b = rng.uniform(0.0, 0.4, len(labels))
    a, b = np.where(labels == 1, a, b), np.where(labels == 1, b, a)
    patches = a[:, None, None, None] * basis[0] + b[:, None, None, None] * basis[1]
    # a linear separator exists by construction: a - b changes sign with the label
    assert np.all((a - b > 0) == (labels == 1))
    data = ExperimentData(patches, labels, np.arange(len(labels)), ["s"] * len(labels), 1)
    base = run_baseline(data, ARCH, Hyper(learning_rate=0.05, epochs=10), k=4, seed=0)
    for rec in base.final.folds:
        assert max(r["criterion"] for r in rec.log if r["selected"]) > 0.9


def test_stage_error_names_fold_and_stage(data):
    labels = data.labels.copy()
    broken = ExperimentData(data.patches, np.zeros_like(labels), data.candidate_ids, data.scan_ids, data.scans)
    broken.labels[:4] = 1  # one nodule per fold at most
    with pytest.raises(CascadeError, match=r"stage 1, fold \d"):
        folds = make_folds(broken, 4, 0)
        run_stage(1, StageConfig(), folds, np.flatnonzero(broken.labels == 0), broken, ARCH, HYPER, 0)


def test_report_files(cascade, tmp_path):
    emit_report(cascade, tmp_path / "a")
    emit_report(cascade, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    for n in ("froc.csv", "histogram.csv", "histogram_stage1.csv", "histogram_stage3.csv", "probabilities.csv",
              "reduction.csv", "stages.csv", "summary.csv", "summary.json"):
        assert n in names
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_baseline_report_has_summary_fields(data, tmp_path):
    base = run_baseline(data, ARCH, Hyper(epochs=1), k=4, seed=0)
    summary = emit_report(base, tmp_path)
    assert set(SUMMARY_FIELDS) <= set(summary)
