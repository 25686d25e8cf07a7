"""Command-line entry point.

Subcommands: validate, train, score, eval-corr, eval-pascal, eval-foil,
judgments, ablate. Exit codes: 0 success, 1 usage error, 2 data/validation
error. All randomness derives from --seed; pass --json for machine-readable
output on stdout (diagnostics go to stderr).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from contextlib import nullcontext

from polos import bundle as bundle_io
from polos import evaluation, judgments as judgments_mod, training
from polos.bundle import BundleError
from polos.head import HeadConfig, HeadError, load_checkpoint, save_checkpoint, score_samples

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

SCHEMA_VERSION = evaluation.SCHEMA_VERSION


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _write_text_atomic(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _emit(payload: dict, as_json: bool, human: str = "") -> None:
    if as_json:
        print(json.dumps(payload, sort_keys=True))
    elif human:
        print(human)


def _load_configs(args) -> tuple[training.TrainConfig, HeadConfig]:
    if getattr(args, "config", None):
        train_cfg, head_cfg = training.load_config_file(args.config)
    else:
        train_cfg, head_cfg = training.TrainConfig(), HeadConfig()
    if getattr(args, "seed", None) is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
        head_cfg = dataclasses.replace(head_cfg, seed=args.seed)
    return train_cfg, head_cfg


def _thread_limit(jobs):
    if jobs is None:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        print("threadpoolctl not installed; --jobs ignored", file=sys.stderr)
        return nullcontext()
    return threadpool_limits(limits=jobs)


def _report_json(report: evaluation.EvalReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_validate(args) -> int:
    samples = bundle_io.read_bundle(args.bundle)
    report = bundle_io.validate_bundle(samples)
    payload = {"schema_version": SCHEMA_VERSION, **report.to_dict()}
    _emit(payload, args.json, f"{report.sample_count} samples, {len(report.findings)} findings")
    for sid, message in report.findings:
        print(f"finding: {sid}: {message}", file=sys.stderr)
    return EXIT_OK if report.ok else EXIT_DATA


def _cmd_train(args) -> int:
    train_cfg, head_cfg = _load_configs(args)
    train = bundle_io.read_bundle(args.data)
    valid = bundle_io.read_bundle(args.val)
    params, log = training.fit(train, valid, head_cfg, train_cfg)
    save_checkpoint(
        args.checkpoint,
        params,
        head_cfg,
        train[0].d_clip,
        train[0].d_rb,
        meta={"train_config": train_cfg.to_dict()},
    )
    if args.log:
        _write_text_atomic(args.log, log.to_jsonl(include_timing=args.timings))
    payload = {
        "schema_version": SCHEMA_VERSION,
        "best_epoch": log.best_epoch,
        "best_tau": log.best_tau,
        "epochs_run": len(log.epochs),
        "checkpoint": args.checkpoint,
    }
    _emit(
        payload,
        args.json,
        f"trained {len(log.epochs)} epochs; best tau {log.best_tau:.4f} at epoch {log.best_epoch}",
    )
    return EXIT_OK


def _cmd_score(args) -> int:
    samples = bundle_io.read_bundle(args.data)
    params, head_cfg, _ = load_checkpoint(args.checkpoint)
    with _thread_limit(args.jobs):
        y_hat, argmax = score_samples(samples, params, head_cfg)
    rows = [
        {
            "sample_id": s.sample_id,
            "score": float(y),
            "argmax_ref": int(k) if k >= 0 else None,
        }
        for s, y, k in zip(samples, y_hat, argmax)
    ]
    if args.out:
        _write_text_atomic(args.out, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    payload = {"schema_version": SCHEMA_VERSION, "scores": rows}
    _emit(payload, args.json, f"scored {len(rows)} samples")
    return EXIT_OK


def _cmd_eval_corr(args) -> int:
    samples = bundle_io.read_bundle(args.data)
    params, head_cfg, _ = load_checkpoint(args.checkpoint)
    with _thread_limit(args.jobs):
        report = evaluation.correlation_report(
            samples, params, head_cfg, statistic=args.statistic,
            dataset_tag=args.tag, seed=args.seed,
        )
    text = _report_json(report)
    if args.out:
        _write_text_atomic(args.out, text + "\n")
    _emit(report.to_dict(), args.json, f"{report.statistic} = {report.value:.4f} (n={report.sample_count})")
    return EXIT_OK


def _cmd_eval_pascal(args) -> int:
    samples = bundle_io.read_bundle(args.data)
    entries = evaluation.read_protocol_manifest(args.manifest)
    pairs = evaluation.load_pascal_pairs(samples, entries)
    params, head_cfg, _ = load_checkpoint(args.checkpoint)
    with _thread_limit(args.jobs):
        per_category, mean = evaluation.pascal_accuracy(
            pairs, params, head_cfg,
            n_refs_drawn=args.draws, seed=args.seed or 0, repeats=args.repeats,
        )
    report = evaluation.EvalReport(
        dataset=args.tag,
        statistic="pascal_accuracy",
        value=mean,
        sample_count=len(pairs),
        seed=args.seed,
        config=head_cfg.to_dict(),
        extras={"categories": per_category, "draws": args.draws, "repeats": args.repeats},
    )
    text = _report_json(report)
    if args.out:
        _write_text_atomic(args.out, text + "\n")
    _emit(report.to_dict(), args.json, f"pascal mean accuracy = {mean:.4f} over {len(pairs)} pairs")
    return EXIT_OK


def _cmd_eval_foil(args) -> int:
    samples = bundle_io.read_bundle(args.data)
    entries = evaluation.read_protocol_manifest(args.manifest)
    pairs = evaluation.load_foil_pairs(samples, entries)
    if args.refs is not None:
        pairs = [p for p in pairs if p.refs_clip.shape[0] == args.refs]
    params, head_cfg, _ = load_checkpoint(args.checkpoint)
    with _thread_limit(args.jobs):
        accuracy = evaluation.foil_accuracy(pairs, params, head_cfg)
    reports = [
        evaluation.EvalReport(
            dataset=args.tag,
            statistic="foil_accuracy",
            value=value,
            sample_count=sum(1 for p in pairs if p.setting == setting),
            seed=args.seed,
            config=head_cfg.to_dict(),
            extras={"setting": setting},
        )
        for setting, value in accuracy.items()
    ]
    text = "\n".join(_report_json(r) for r in reports)
    if args.out:
        _write_text_atomic(args.out, text + "\n")
    payload = {"schema_version": SCHEMA_VERSION, "reports": [r.to_dict() for r in reports]}
    _emit(payload, args.json, "; ".join(f"{r.extras['setting']}: {r.value:.4f}" for r in reports))
    return EXIT_OK


def _cmd_judgments(args) -> int:
    records = judgments_mod.read_judgments(args.records)
    thresholds = judgments_mod.QCThresholds(
        min_median_response_time=args.min_median_rt,
        max_constant_run=args.max_constant_run,
        min_distinct_ratings=args.min_distinct,
    )
    kept, excluded = judgments_mod.filter_evaluators(records, thresholds)
    for prof in excluded:
        print(f"excluded {prof.evaluator_id}: {prof.exclusion_reason}", file=sys.stderr)
    all_ids = sorted({r.sample_id for r in records})
    scores, missing = judgments_mod.aggregate_scores(
        kept, method=args.method, expected_ids=all_ids
    )
    for sid in missing:
        print(f"sample {sid} lost all judgments to filtering", file=sys.stderr)
    judgments_mod.write_aggregated(args.out, scores)
    if args.splits:
        ratios = tuple(float(x) for x in args.ratios.split(","))
        split_map = judgments_mod.make_splits(
            [s.sample_id for s in scores], ratios=ratios, seed=args.seed or 0
        )
        entries = [
            {"sample_id": sid, "split": name, "source": args.source}
            for name in bundle_io.SPLIT_NAMES
            for sid in split_map[name].sample_ids
        ]
        bundle_io.write_split_manifest(args.splits, entries)
    if args.histogram:
        counts, summary = judgments_mod.score_distribution([s.score for s in scores])
        _write_text_atomic(
            args.histogram,
            json.dumps(
                {"schema_version": SCHEMA_VERSION, "bin_counts": counts.tolist(), **summary},
                sort_keys=True,
            )
            + "\n",
        )
    payload = {
        "schema_version": SCHEMA_VERSION,
        "records_in": len(records),
        "records_kept": len(kept),
        "evaluators_excluded": [
            {"evaluator_id": p.evaluator_id, "reason": p.exclusion_reason} for p in excluded
        ],
        "samples_scored": len(scores),
        "samples_lost": missing,
    }
    _emit(
        payload,
        args.json,
        f"kept {len(kept)}/{len(records)} records; excluded {len(excluded)} evaluators; "
        f"scored {len(scores)} samples",
    )
    return EXIT_OK


_STANDARD_CELLS = [
    {"fusion_mode": "concat_only"},
    {"use_image": False},
    {"use_clip_text": False},
    {"use_roberta": False},
    {"aggregate": "mean"},
    {},
]

_GRID_DOMAINS = {
    "aggregate": ["max", "mean"],
    "fusion_mode": ["full", "concat_only"],
    "use_image": [True, False],
    "use_clip_text": [True, False],
    "use_roberta": [True, False],
}


def _grid_cells(spec: str) -> list[dict]:
    if spec == "standard":
        return [dict(cell) for cell in _STANDARD_CELLS]
    axes = [name.strip() for name in spec.split(",") if name.strip()]
    for name in axes:
        if name not in _GRID_DOMAINS:
            raise ValueError(
                f"unknown grid field {name!r}; choose from {sorted(_GRID_DOMAINS)} or 'standard'"
            )
    cells = [{}]
    for name in axes:
        cells = [dict(c, **{name: v}) for c in cells for v in _GRID_DOMAINS[name]]
    return cells


def _cmd_ablate(args) -> int:
    train_cfg, base_head = _load_configs(args)
    cells = _grid_cells(args.grid)
    train = bundle_io.read_bundle(args.data)
    valid = bundle_io.read_bundle(args.val)
    test = bundle_io.read_bundle(args.test) if args.test else valid

    results = []
    for cell in cells:
        item = {"cell": cell}
        try:
            head_cfg = dataclasses.replace(base_head, **cell)
            params, log = training.fit(train, valid, head_cfg, train_cfg)
            report = evaluation.correlation_report(
                test, params, head_cfg, statistic=args.statistic,
                dataset_tag=args.tag, seed=train_cfg.seed,
            )
            report.extras["cell"] = cell
            report.extras["best_epoch"] = log.best_epoch
            item["report"] = report.to_dict()
        except (HeadError, training.TrainError, evaluation.DegenerateStatisticError) as exc:
            item["error"] = str(exc)
            print(f"cell {cell}: {exc}", file=sys.stderr)
        results.append(item)

    payload = {"schema_version": SCHEMA_VERSION, "grid": args.grid, "cells": results}
    if args.out:
        _write_text_atomic(args.out, json.dumps(payload, sort_keys=True, indent=2) + "\n")
    done = sum(1 for r in results if "report" in r)
    _emit(payload, args.json, f"{done}/{len(results)} cells evaluated")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="polos", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, seed_default=None):
        p.add_argument("--seed", type=int, default=seed_default)
        p.add_argument("--json", action="store_true")
        p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("validate", help="check a bundle file")
    p.add_argument("bundle")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("train", help="fit the head on a scored bundle")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log")
    p.add_argument("--timings", action="store_true", help="include wall time in the log")
    common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("score", help="score a bundle with a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("eval-corr", help="rank correlation against human scores")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--statistic", choices=["tau_b", "tau_c"], default="tau_c")
    p.add_argument("--tag", default="")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=_cmd_eval_corr)

    p = sub.add_parser("eval-pascal", help="pairwise preference accuracy")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--draws", type=int, default=5)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--tag", default="")
    p.add_argument("--out")
    common(p, seed_default=0)
    p.set_defaults(func=_cmd_eval_pascal)

    p = sub.add_parser("eval-foil", help="hallucination detection accuracy")
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--refs", type=int, choices=[1, 4], default=None)
    p.add_argument("--tag", default="")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=_cmd_eval_foil)

    p = sub.add_parser("judgments", help="QC, normalize, and aggregate raw judgments")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--splits")
    p.add_argument("--histogram")
    p.add_argument("--ratios", default="0.6,0.2,0.2")
    p.add_argument("--source", default="judgments")
    p.add_argument("--method", choices=["mean", "median"], default="mean")
    p.add_argument("--min-median-rt", type=float, default=2.0)
    p.add_argument("--max-constant-run", type=int, default=20)
    p.add_argument("--min-distinct", type=int, default=2)
    common(p)
    p.set_defaults(func=_cmd_judgments)

    p = sub.add_parser("ablate", help="train/evaluate a grid of head variants")
    p.add_argument("--grid", required=True, help="'standard' or comma-separated config fields")
    p.add_argument("--data", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test")
    p.add_argument("--config")
    p.add_argument("--statistic", choices=["tau_b", "tau_c"], default="tau_c")
    p.add_argument("--tag", default="")
    p.add_argument("--out")
    common(p)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (
        BundleError,
        HeadError,
        training.TrainError,
        judgments_mod.JudgmentError,
        evaluation.DegenerateStatisticError,
        ValueError,
        KeyError,
        OSError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
