"""Bookkeeping checks on a finished cascade run.

``cascade_violations`` returns a list of human-readable problems; an empty
list means every invariant held.
"""

from __future__ import annotations

import numpy as np

from oracles import two_pass_std

TH_TOL = 1e-12


def _set(a):
    return set(np.asarray(a).tolist())


def cascade_violations(result, divisor_of=lambda stage: stage.config.divisor) -> list[str]:
    bad: list[str] = []
    labels = np.asarray(result.labels)
    folds = result.folds
    n = len(labels)
    expected_input = set(range(n))
    rejected_anywhere: set[int] = set()

    for stage in [*result.stages, result.final]:
        name = f"stage {stage.index}"
        inp, surv, rej = _set(stage.input_ids), _set(stage.survivors), _set(stage.rejected)
        # nesting: each stage sees exactly the previous survivors
        if inp != expected_input:
            bad.append(f"{name}: input is not the previous stage's survivors")
        # partition
        if surv & rej or surv | rej != inp:
            bad.append(f"{name}: survivors and rejected do not partition the input")
        if not surv <= inp:
            bad.append(f"{name}: survivors not nested in input")
        tests = [_set(r.test_ids) for r in stage.folds]
        if sum(len(t) for t in tests) != len(inp) or set().union(*tests) != inp:
            bad.append(f"{name}: fold test sets do not partition the input")
        gated = stage is not result.final
        for rec in stage.folds:
            tr, va, te = _set(rec.train_ids), _set(rec.val_ids), _set(rec.test_ids)
            # leakage
            if tr & te or tr & va or va & te:
                bad.append(f"{name} fold {rec.fold}: train/validation/test overlap")
            if any(folds.folds[i] in (rec.fold, rec.val_fold) for i in tr):
                bad.append(f"{name} fold {rec.fold}: training id from the test or validation fold")
            if any(folds.folds[i] != rec.fold for i in te) or any(folds.folds[i] != rec.val_fold for i in va):
                bad.append(f"{name} fold {rec.fold}: id assigned to the wrong fold")
            if not (tr | va | te) <= inp:
                bad.append(f"{name} fold {rec.fold}: uses candidates rejected earlier")
            if not gated:
                continue
            neg = rec.val_probs[labels[rec.val_ids] == 0]
            want_th = two_pass_std(neg) / divisor_of(stage)
            if abs(rec.threshold - want_th) > TH_TOL:
                bad.append(f"{name} fold {rec.fold}: th {rec.threshold!r} != sigma/divisor {want_th!r}")
            want_rej = {int(i) for i, p in zip(rec.test_ids, rec.test_probs) if p < rec.threshold}
            if _set(rec.rejected) != want_rej or _set(rec.survivors) != te - want_rej:
                bad.append(f"{name} fold {rec.fold}: gate disagrees with c(x) < th")
        rejected_anywhere |= rej
        expected_input = surv

    probs = np.asarray(result.probabilities)
    if rejected_anywhere and np.any(probs[sorted(rejected_anywhere)] != 0):
        bad.append("a rejected candidate has nonzero final probability")
    final_ids = sorted(_set(result.final.survivors))
    if np.any(probs[final_ids] != result.final.scores[final_ids]):
        bad.append("final probabilities differ from final-stage scores")
    if len(rejected_anywhere) + len(final_ids) != n:
        bad.append("rejected and final survivors do not cover every candidate")
    return bad
