"""Command-line entry point: ``cascade-fpr synth | run | eval``.

Failures print one JSON line ``{"error": ..., "message": ..., ["field": ...]}``
to stderr and exit nonzero (2 for usage/config errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .cascade import CascadeResult, ExperimentData, run_baseline, run_cascade
from .config import ConfigError, RunConfig, apply_overrides, describe_fields, load_config
from .evaluation import emit_evaluation, emit_report, fmt, read_probability_table, write_csv
from .ingest import Dataset
from .synth import load_dataset, load_real_dataset, synthesize_dataset, write_dataset

__all__ = ["main", "cmd_synth", "cmd_run", "cmd_eval", "resolve_dataset", "write_result"]

log = logging.getLogger("cascade_fpr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fields_epilog() -> str:
    return "config fields (dotted path = default):\n" + "\n".join(describe_fields())


def build_parser() -> argparse.ArgumentParser:
    fmt_cls = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="cascade-fpr", description="Cascaded single-sided CNN false-positive reduction.",
                     epilog=_fields_epilog(), formatter_class=fmt_cls)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_default):
        p.add_argument("--config", help="YAML or JSON config file (default: built-in defaults)")
        p.add_argument("--seed", type=int, help="master seed, overrides `seed`")
        p.add_argument("--out", default=out_default, help=f"output directory (default: {out_default})")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress lines to stderr")

    p = sub.add_parser("synth", help="write a seeded synthetic dataset", epilog=_fields_epilog(),
                       formatter_class=fmt_cls)
    common(p, "synth_data")

    p = sub.add_parser("run", help="cross-validated cascade or baseline run with reports",
                       epilog=_fields_epilog(), formatter_class=fmt_cls)
    common(p, "run_out")
    p.add_argument("--mode", choices=("cascade", "baseline"), help="overrides `mode`")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for folds (default: 1); "
                                                       "results do not depend on it")
    p.add_argument("--stages", type=int, help="number of gating stages, overrides the `stages` length")
    p.add_argument("--ratio", type=float, help="training ratio for every stage, overrides `stages[i].ratio`")
    p.add_argument("--k", type=int, help="folds, overrides `k`")
    p.add_argument("--epochs", type=int, help="overrides `hyper.epochs`")

    p = sub.add_parser("eval", help="recompute FROC, histogram and summary from a probability table")
    p.add_argument("table", help="probability table (candidate_id,scan_id,label,probability)")
    p.add_argument("--out", default="eval_out", help="output directory (default: eval_out)")
    p.add_argument("--scans", type=int, help="scan count (default: distinct scan ids in the table)")
    p.add_argument("--bins", type=int, default=50, help="histogram bins (default: 50)")
    return parser


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out: str | Path) -> Path:
    """Write the synthetic dataset described by ``cfg.dataset.synth``; returns the manifest path."""
    dataset = synthesize_dataset(cfg.dataset.synth.to_spec(), cfg.seed)
    return write_dataset(dataset, out)


def resolve_dataset(cfg: RunConfig) -> Dataset:
    ds = cfg.dataset
    if ds.source == "synthetic":
        return synthesize_dataset(ds.synth.to_spec(), cfg.seed)
    if ds.source == "directory":
        return load_dataset(ds.path)
    return load_real_dataset(ds.volume_dir, ds.candidates)


def cmd_run(cfg: RunConfig, out: str | Path, jobs: int = 1) -> CascadeResult:
    """Full cross-validated pipeline for ``cfg.mode``; writes every report under ``out``."""
    if jobs < 1:
        raise ConfigError("jobs", f"must be >= 1, got {jobs}")
    dataset = resolve_dataset(cfg)
    log.info("dataset: %d scans, %d candidates", dataset.scan_count, len(dataset.candidates))
    data = ExperimentData.from_dataset(dataset, cfg.patch_size, cfg.slabs)
    arch, hyper = cfg.arch_spec(), cfg.hyper.to_hyper()
    if cfg.mode == "cascade":
        result = run_cascade(data, cfg.stage_configs(), arch, hyper, k=cfg.k, seed=cfg.seed, jobs=jobs)
    else:
        result = run_baseline(data, arch, hyper, k=cfg.k, seed=cfg.seed, jobs=jobs)
    write_result(result, cfg, out)
    return result


def cmd_eval(table: str | Path, out: str | Path, scans: int | None = None, bins: int = 50) -> dict:
    ids, scan_ids, labels, probs = read_probability_table(table)
    n_scans = scans if scans is not None else len(set(scan_ids))
    return emit_evaluation(Path(out), ids, scan_ids, labels, probs, n_scans, bins)


# --------------------------------------------------------------------------
# run outputs


def _stage_name(stage, result: CascadeResult) -> str:
    return "final" if stage is result.final else f"stage{stage.index}"


def write_result(result: CascadeResult, cfg: RunConfig, out: str | Path) -> dict:
    """Reports, per-candidate scores, fold map, models, training logs and run_info.json."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    summary = emit_report(result, out, cfg.bins)

    folds = result.folds.folds
    all_stages = [*result.stages, result.final]
    header = ["candidate_id", "scan_id", "label", "fold", *(_stage_name(s, result) for s in all_stages),
              "probability"]
    rows = []
    for i in range(len(result.labels)):
        scores = ["" if np.isnan(s.scores[i]) else repr(float(s.scores[i])) for s in all_stages]
        rows.append([int(result.candidate_ids[i]), result.scan_ids[i], int(result.labels[i]), int(folds[i]),
                     *scores, repr(float(result.probabilities[i]))])
    write_csv(out / "stage_scores.csv", header, rows)

    (out / "models").mkdir(exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)
    for stage in all_stages:
        name = _stage_name(stage, result)
        for rec in stage.folds:
            (out / "models" / f"{name}_fold{rec.fold}.cfpr").write_bytes(rec.model)
            write_csv(out / "logs" / f"{name}_fold{rec.fold}.csv", ["epoch", "mean_loss", "criterion", "selected"],
                      [(r["epoch"], r["mean_loss"], r["criterion"], r["selected"]) for r in rec.log])

    info = {
        "mode": result.mode,
        "seed": result.seed,
        "config": json.loads(cfg.model_dump_json()),
        "dataset": {"scans": result.scans, "candidates": int(len(result.labels)),
                    "nodules": int(result.labels.sum()),
                    "non_nodules": int((result.labels == 0).sum())},
        "stages": [{"stage": s.index, "thresholds": [float(fmt(t)) for t in s.thresholds],
                    "survivors": int(len(s.survivors)), "rejected": int(len(s.rejected))}
                   for s in result.stages],
        "summary": {k: (float(fmt(v)) if isinstance(v, float) else v) for k, v in summary.items()},
    }
    (out / "run_info.json").write_text(json.dumps(info, indent=2) + "\n", encoding="utf-8")
    return summary


# --------------------------------------------------------------------------


def _fail(kind: str, message: str, field: str | None = None, code: int = 1) -> int:
    err = {"error": kind, "message": " ".join(str(message).split())}
    if field is not None:
        err["field"] = field
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), code=2)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "eval":
            summary = cmd_eval(args.table, args.out, args.scans, args.bins)
        else:
            cfg = load_config(args.config)
            if args.command == "synth":
                cfg = apply_overrides(cfg, seed=args.seed)
                manifest = cmd_synth(cfg, args.out)
                print(json.dumps({"manifest": str(manifest)}))
                return 0
            cfg = apply_overrides(cfg, seed=args.seed, mode=args.mode, stages=args.stages, ratio=args.ratio,
                                  k=args.k, epochs=args.epochs)
            result = cmd_run(cfg, args.out, args.jobs)
            summary = json.loads((Path(args.out) / "summary.json").read_text())
            log.info("%s run finished: average sensitivity %.4f", result.mode, summary["average_sensitivity"])
        print(json.dumps(summary if args.command == "run" else
                         {k: (float(fmt(v)) if isinstance(v, float) else v) for k, v in summary.items()}))
        return 0
    except ConfigError as exc:
        return _fail("config", exc.message, field=exc.field, code=2)
    except KeyboardInterrupt:
        return _fail("interrupted", "interrupted", code=130)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one JSON line
        return _fail(type(exc).__name__, str(exc))
