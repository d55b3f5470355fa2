"""Command-line entry points: ingest, aggregate, render, describe,
optimize, run, report, time."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .aggregation import AggregationConfig, aggregate_record
from .client import ChatClient, EndpointConfig
from .optimizer import STRATEGIES, OptimizationBudget, optimize
from .records import CLAMP, FeatureCatalog, parse_records, record_to_json
from .runner import RunConfig, ablate_feature, run_experiment, time_inference, write_atomic
from .serialize import render_numeric_block
from .tasks import get_task


def _load_catalog(path: str | None) -> FeatureCatalog:
    return FeatureCatalog.from_json(path) if path else FeatureCatalog.default()


def _aggregation_from_args(args) -> AggregationConfig:
    return AggregationConfig(
        window_hours=args.window_hours,
        bucket_count=args.buckets,
        excluded_features=frozenset(args.exclude or ()),
        imputation=args.imputation,
    )


def _add_record_args(parser):
    parser.add_argument("--records", required=True, help="record JSONL file")
    parser.add_argument("--catalog", default=None, help="feature catalog JSON (default: built-in)")
    parser.add_argument("--task", default=None, choices=["smoking", "mednli", "clinsts", "mortality"])


def _add_aggregation_args(parser):
    parser.add_argument("--window-hours", type=int, default=48)
    parser.add_argument("--buckets", type=int, default=6)
    parser.add_argument("--exclude", action="append", default=None, metavar="FEATURE_ID")
    parser.add_argument("--imputation", default="forward_fill", choices=["forward_fill", "omit_feature"])


def cmd_ingest(args) -> int:
    catalog = _load_catalog(args.catalog)
    result = parse_records(args.records, catalog, task=args.task, outlier_policy=args.policy)
    lines = "".join(json.dumps(record_to_json(r), ensure_ascii=False) + "\n" for r in result.records)
    if args.out:
        write_atomic(Path(args.out), lines)
    else:
        sys.stdout.write(lines)
    if args.rejects:
        rows = [{"line_no": r.line_no, "reason": r.reason} for r in result.rejections]
        write_atomic(Path(args.rejects), "".join(json.dumps(r) + "\n" for r in rows))
    print(f"parsed {len(result.records)} records, rejected {len(result.rejections)} lines",
          file=sys.stderr)
    return 0


def cmd_aggregate(args) -> int:
    catalog = _load_catalog(args.catalog)
    cfg = _aggregation_from_args(args)
    result = parse_records(args.records, catalog, task=args.task)
    lines = []
    for record in result.records:
        series = aggregate_record(record, catalog, cfg)
        lines.append(json.dumps({
            "id": record.id,
            "series": [
                {
                    "feature": s.feature_id,
                    "means": s.bucket_means,
                    "observed": s.observed,
                    "static_value": s.static_value,
                }
                for s in series
            ],
        }, ensure_ascii=False) + "\n")
    out = "".join(lines)
    if args.out:
        write_atomic(Path(args.out), out)
    else:
        sys.stdout.write(out)
    return 0


def _find_record(args, catalog):
    result = parse_records(args.records, catalog, task=args.task)
    for record in result.records:
        if args.id is None or record.id == args.id:
            return record
    raise SystemExit(f"record {args.id!r} not found in {args.records}")


def cmd_render(args) -> int:
    catalog = _load_catalog(args.catalog)
    record = _find_record(args, catalog)
    block = render_numeric_block(aggregate_record(record, catalog, _aggregation_from_args(args)))
    print(block.text)
    return 0


def cmd_describe(args) -> int:
    catalog = _load_catalog(args.catalog)
    record = _find_record(args, catalog)
    block = render_numeric_block(aggregate_record(record, catalog, _aggregation_from_args(args)))
    client = ChatClient(EndpointConfig.from_env(base_url=args.endpoint_url, model=args.model))
    result = client.generate_description(block)
    print(json.dumps({
        "id": record.id,
        "description": result.text,
        "sentence_count": result.check.sentence_count,
        "violations": result.check.violations,
    }, indent=2, ensure_ascii=False))
    return 0


def cmd_optimize(args) -> int:
    with open(args.budget, encoding="utf-8") as fh:
        budget = OptimizationBudget.from_dict(json.load(fh))
    task = get_task(args.task)
    catalog = _load_catalog(args.catalog)
    records = parse_records(args.records, catalog, task=args.task).records
    client = ChatClient(EndpointConfig.from_env(base_url=args.endpoint_url, model=args.model))
    result = optimize(
        task, records, budget, client=client, seed=args.seed,
        strategies=args.strategy or list(STRATEGIES),
    )
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "trace.jsonl", "".join(json.dumps(row) + "\n" for row in result.trace))
    write_atomic(out / "best.json", json.dumps({
        "text": result.best.text,
        "strategy": result.best.strategy,
        "hash": result.best.hash,
        "calls_used": result.calls_used,
        "stopped_early": result.stopped_early,
    }, indent=2, ensure_ascii=False) + "\n")
    print(f"best candidate ({result.best.strategy}, {result.calls_used} calls): {result.best.text}")
    return 0


def cmd_run(args) -> int:
    cfg = RunConfig.from_json(args.config)
    if args.exclude:
        for feature_id in args.exclude:
            cfg = ablate_feature(cfg, feature_id)
    report = run_experiment(cfg, out_dir=args.out_dir)
    print(json.dumps(report.median.to_json_dict(), indent=2))
    return 0


def _percent(value):
    return None if value is None else round(value * 100, 2)


def cmd_report(args) -> int:
    doc = json.loads((Path(args.run_dir) / "report.json").read_text("utf-8"))
    median = doc["median"]
    print(f"task: {doc['task']}  mode: {doc['mode']}  n={doc['n_records']}  "
          f"reps={len(doc['repetitions'])}")
    for name in ("macro_f1", "micro_f1", "auroc", "auprc"):
        value = _percent(median.get(name))
        if value is not None:
            print(f"  {name}: {value}")
    for name, reason in (median.get("undefined") or {}).items():
        print(f"  {name}: undefined ({reason})")
    timing_path = Path(args.run_dir) / "timing.json"
    if timing_path.exists():
        timing = json.loads(timing_path.read_text("utf-8"))
        print(f"  wall_time_s_total: {timing['wall_time_s_total']:.3f}")
    return 0


def cmd_time(args) -> int:
    cfg = RunConfig.from_json(args.config)
    result = time_inference(cfg, args.n)
    print(json.dumps({
        "n_samples": result.n_samples,
        "total_s": result.total_s,
        "per_100_s": result.per_100_s,
        "energy_j": result.energy_j if result.energy_j is not None else "unavailable",
    }, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ehrllm")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse and canonicalize a record file")
    _add_record_args(p)
    p.add_argument("--policy", default=CLAMP, choices=["clamp", "drop"])
    p.add_argument("--out", default=None)
    p.add_argument("--rejects", default=None)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("aggregate", help="bucket time series per record")
    _add_record_args(p)
    _add_aggregation_args(p)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_aggregate)

    p = sub.add_parser("render", help="print a record's numeric block")
    _add_record_args(p)
    _add_aggregation_args(p)
    p.add_argument("--id", default=None)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("describe", help="generate a prose time-series summary")
    _add_record_args(p)
    _add_aggregation_args(p)
    p.add_argument("--id", default=None)
    p.add_argument("--endpoint-url", required=True)
    p.add_argument("--model", default="default")
    p.set_defaults(fn=cmd_describe)

    p = sub.add_parser("optimize", help="search for a better task instruction")
    p.add_argument("--task", required=True, choices=["smoking", "mednli", "clinsts", "mortality"])
    p.add_argument("--budget", required=True, help="budget JSON file")
    p.add_argument("--records", required=True)
    p.add_argument("--catalog", default=None)
    p.add_argument("--endpoint-url", required=True)
    p.add_argument("--model", default="default")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", action="append", default=None, choices=list(STRATEGIES))
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("run", help="execute a configured experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--exclude", action="append", default=None, metavar="FEATURE_ID",
                   help="ablate a feature on top of the config")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("report", help="pretty-print a run report (percent-scaled)")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("time", help="wall-clock sequential inference")
    p.add_argument("--config", required=True)
    p.add_argument("--n", type=int, default=100)
    p.set_defaults(fn=cmd_time)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
