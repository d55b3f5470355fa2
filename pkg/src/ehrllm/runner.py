"""Experiment orchestration: configs, repetitions, persistence, timing.

A run builds one prompt per record (aggregate, serialize or describe,
truncate, assemble), predicts through the chat client, scores each
repetition, and reports the per-metric median. Reproducible artifacts
(``report.json``, ``predictions.jsonl``, ``trace.jsonl``,
``config.lock.json``) contain no volatile fields; wall-clock and latency
data go to ``timing.json`` instead, so two identical runs against a
deterministic endpoint produce byte-identical reports.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .aggregation import AggregationConfig, aggregate_record
from .client import ChatClient, EndpointConfig, InferenceRequest
from .metrics import (
    MetricsReport,
    PredictionRecord,
    classification_report,
    median_of_runs,
    scored_report,
)
from .records import CLAMP, OUTLIER_POLICIES, FeatureCatalog, PatientRecord, parse_records
from .serialize import TsRepresentation, render_numeric_block
from .tasks import SCORED_BINARY, TaskSpec, build_input, get_task
from .tokens import BudgetPlan, TokenizerHandle, count_tokens, get_tokenizer, truncate_to_fit

log = logging.getLogger(__name__)

MODE_TEXT = "text"
MODE_TEXT_TS_NUMERIC = "text+ts-numeric"
MODE_TEXT_TS_DESCRIPTION = "text+ts-description"
MODE_TS_ONLY = "ts-only"
MODES = (MODE_TEXT, MODE_TEXT_TS_NUMERIC, MODE_TEXT_TS_DESCRIPTION, MODE_TS_ONLY)

RUN_CONFIG_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Run configuration is invalid or inconsistent with the task."""


class RunError(RuntimeError):
    """A run failed; the message carries record-level context."""


@dataclass
class BudgetSection:
    max_context: int = 2048
    tokenizer: str = "whitespace"
    tokenizer_cmd: list[str] | None = None

    def to_dict(self) -> dict:
        return {
            "max_context": self.max_context,
            "tokenizer": self.tokenizer,
            "tokenizer_cmd": self.tokenizer_cmd,
        }


@dataclass
class RunConfig:
    """One experiment: task, input mode, data, budget, endpoint, repetitions."""

    task: str
    records: str
    mode: str = MODE_TEXT
    catalog: str | None = None
    split: str = "test"
    repetitions: int = 3
    seed: int = 0
    outlier_policy: str = CLAMP
    aggregation: AggregationConfig = field(default_factory=AggregationConfig)
    budget: BudgetSection = field(default_factory=BudgetSection)
    endpoint: EndpointConfig | None = None
    instruction: dict = field(default_factory=dict)
    energy_meter_cmd: str | None = None

    def __post_init__(self):
        task = get_task(self.task)  # raises on unknown id
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; available: {list(MODES)}")
        if self.mode != MODE_TEXT and not task.allows_ts:
            raise ConfigError(f"mode {self.mode!r} is only valid for tasks with time series")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.split not in ("train", "dev", "test"):
            raise ConfigError(f"invalid split {self.split!r}")
        if self.outlier_policy not in OUTLIER_POLICIES:
            raise ConfigError(f"unknown outlier policy {self.outlier_policy!r}")
        if isinstance(self.instruction, dict) and self.instruction:
            kind = self.instruction.get("type")
            if kind == "fixed":
                if not self.instruction.get("text"):
                    raise ConfigError("fixed instruction needs nonempty 'text'")
            elif kind == "trace":
                if not self.instruction.get("path"):
                    raise ConfigError("trace instruction needs 'path'")
            else:
                raise ConfigError(f"instruction type must be 'fixed' or 'trace', got {kind!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        version = doc.get("format_version", RUN_CONFIG_FORMAT_VERSION)
        if version != RUN_CONFIG_FORMAT_VERSION:
            raise ConfigError(f"unsupported run config format_version: {version!r}")
        endpoint = None
        if doc.get("endpoint"):
            ep = dict(doc["endpoint"])
            ep.setdefault("base_url", os.environ.get("EHRLLM_BASE_URL", ""))
            ep.pop("api_key", None)  # credentials come from the environment only
            if not ep["base_url"]:
                raise ConfigError("endpoint.base_url missing (config or EHRLLM_BASE_URL)")
            try:
                endpoint = EndpointConfig(api_key=os.environ.get("EHRLLM_API_KEY"), **ep)
            except TypeError as exc:
                raise ConfigError(f"bad endpoint section: {exc}") from exc
        budget_doc = doc.get("budget", {})
        budget = BudgetSection(
            max_context=int(budget_doc.get("max_context", 2048)),
            tokenizer=budget_doc.get("tokenizer", "whitespace"),
            tokenizer_cmd=budget_doc.get("tokenizer_cmd"),
        )
        return cls(
            task=doc["task"],
            records=doc["records"],
            mode=doc.get("mode", MODE_TEXT),
            catalog=doc.get("catalog"),
            split=doc.get("split", "test"),
            repetitions=int(doc.get("repetitions", 3)),
            seed=int(doc.get("seed", 0)),
            outlier_policy=doc.get("outlier_policy", CLAMP),
            aggregation=AggregationConfig.from_dict(doc.get("aggregation", {})),
            budget=budget,
            endpoint=endpoint,
            instruction=doc.get("instruction", {}),
            energy_meter_cmd=doc.get("energy_meter_cmd"),
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def resolved_dict(self) -> dict:
        """Full config with defaults filled in; credentials excluded."""
        endpoint = None
        if self.endpoint is not None:
            endpoint = dataclasses.asdict(self.endpoint)
            endpoint.pop("api_key", None)
        return {
            "format_version": RUN_CONFIG_FORMAT_VERSION,
            "task": self.task,
            "records": self.records,
            "mode": self.mode,
            "catalog": self.catalog,
            "split": self.split,
            "repetitions": self.repetitions,
            "seed": self.seed,
            "outlier_policy": self.outlier_policy,
            "aggregation": self.aggregation.to_dict(),
            "budget": self.budget.to_dict(),
            "endpoint": endpoint,
            "instruction": dict(self.instruction),
            "energy_meter_cmd": self.energy_meter_cmd,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class TimingInfo:
    wall_time_s_per_rep: list[float]
    wall_time_s_total: float
    per_100_samples_s: list[float]  # each repetition normalized to 100 records


@dataclass
class RunReport:
    config_hash: str
    repetitions: list[MetricsReport]
    median: MetricsReport
    timing: TimingInfo
    out_dir: Path | None
    n_rejected: int = 0


@dataclass
class TimingReport:
    n_samples: int
    total_s: float
    per_100_s: float
    energy_j: float | None  # None = no meter configured


def write_atomic(path: Path, data: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(data, encoding="utf-8")
    os.replace(tmp, path)


def ablate_feature(cfg: RunConfig, feature_id: str) -> RunConfig:
    """Copy of the config with one more feature excluded from aggregation."""
    catalog = FeatureCatalog.from_json(cfg.catalog) if cfg.catalog else FeatureCatalog.default()
    if feature_id not in catalog:
        raise KeyError(f"feature {feature_id!r} not in catalog")
    aggregation = dataclasses.replace(
        cfg.aggregation, excluded_features=cfg.aggregation.excluded_features | {feature_id}
    )
    return dataclasses.replace(cfg, aggregation=aggregation)


def resolve_instruction(cfg: RunConfig, task: TaskSpec) -> str:
    """Fixed text, the best candidate of an optimizer run, or the task default."""
    source = cfg.instruction
    if not source:
        return task.description
    if source["type"] == "fixed":
        return source["text"]
    best_path = Path(source["path"])
    if best_path.is_dir():
        best_path = best_path / "best.json"
    doc = json.loads(best_path.read_text("utf-8"))
    return doc["text"]


def _build_ts(
    record: PatientRecord,
    cfg: RunConfig,
    catalog: FeatureCatalog,
    client: ChatClient,
    violations: dict[str, list[str]],
) -> TsRepresentation:
    if cfg.mode == MODE_TEXT:
        return TsRepresentation.none()
    block = render_numeric_block(aggregate_record(record, catalog, cfg.aggregation))
    if cfg.mode in (MODE_TEXT_TS_NUMERIC, MODE_TS_ONLY):
        return TsRepresentation.numeric(block)
    result = client.generate_description(block)
    if result.check.violations:
        violations[record.id] = list(result.check.violations)
    return TsRepresentation.description(result.text)


def build_record_prompt(
    record: PatientRecord,
    task: TaskSpec,
    cfg: RunConfig,
    catalog: FeatureCatalog,
    client: ChatClient,
    instruction: str,
    tokenizer: TokenizerHandle,
    violations: dict[str, list[str]] | None = None,
) -> str:
    """Aggregate, serialize, truncate and assemble one record's prompt."""
    if violations is None:
        violations = {}
    ts = _build_ts(record, cfg, catalog, client, violations)
    include_note = cfg.mode != MODE_TS_ONLY
    note = record.note if include_note else ""
    reserved = (
        count_tokens(instruction, tokenizer)
        + count_tokens(ts.payload, tokenizer)
        + count_tokens(task.query, tokenizer)
    )
    plan = BudgetPlan(max_context=cfg.budget.max_context, reserved=reserved)
    note, _ = truncate_to_fit(note, plan, tokenizer)
    model_input = build_input(task, record, instruction=instruction, ts=ts, include_note=include_note)
    return dataclasses.replace(model_input, note=note).render()


def _tokenizer_for(cfg: RunConfig) -> TokenizerHandle:
    if cfg.budget.tokenizer_cmd:
        from .tokens import SubprocessTokenizer

        return SubprocessTokenizer(cfg.budget.tokenizer_cmd).handle()
    return get_tokenizer(cfg.budget.tokenizer)


def _predict_one(
    record: PatientRecord,
    task: TaskSpec,
    cfg: RunConfig,
    catalog: FeatureCatalog,
    client: ChatClient,
    instruction: str,
    tokenizer: TokenizerHandle,
    violations: dict[str, list[str]],
) -> tuple[PredictionRecord, str]:
    try:
        prompt = build_record_prompt(
            record, task, cfg, catalog, client, instruction, tokenizer, violations
        )
        if task.kind == SCORED_BINARY:
            scored = client.score(prompt, task.positive_token, task.negative_token)
            pred = PredictionRecord(
                record.id, task.gold(record), scored.value, scored.unparsed, scored.latency_ms
            )
            return pred, scored.raw_text
        result = client.classify(prompt, task.schema)
        pred = PredictionRecord(
            record.id, task.gold(record), result.label, result.unparsed, result.latency_ms
        )
        return pred, result.raw_text
    except Exception as exc:
        raise RunError(f"record {record.id!r}: {exc}") from exc


def run_experiment(cfg: RunConfig, out_dir: str | Path | None = None) -> RunReport:
    """Execute a configured experiment and persist its artifacts.

    Repetitions run sequentially (comparable timing); records within a
    repetition are predicted concurrently up to the client's parallelism
    limit, with output order fixed to input order.
    """
    task = get_task(cfg.task)
    if cfg.endpoint is None:
        raise ConfigError("run config needs an endpoint section")
    catalog = FeatureCatalog.from_json(cfg.catalog) if cfg.catalog else FeatureCatalog.default()
    parsed = parse_records(cfg.records, catalog, task=cfg.task, outlier_policy=cfg.outlier_policy)
    records = [r for r in parsed.records if r.split == cfg.split]
    if not records:
        raise RunError(f"no records with split {cfg.split!r} in {cfg.records}")

    client = ChatClient(cfg.endpoint)
    instruction = resolve_instruction(cfg, task)
    tokenizer = _tokenizer_for(cfg)

    reports: list[MetricsReport] = []
    wall_times: list[float] = []
    prediction_rows: list[dict] = []
    description_violations: dict[str, list[str]] = {}
    for rep in range(cfg.repetitions):
        start = time.perf_counter()
        with ThreadPoolExecutor(max_workers=cfg.endpoint.parallelism) as pool:
            futures = [
                pool.submit(
                    _predict_one, rec, task, cfg, catalog, client, instruction, tokenizer,
                    description_violations,
                )
                for rec in records
            ]
            results = [f.result() for f in futures]
        wall = time.perf_counter() - start
        wall_times.append(wall)

        preds = [pred for pred, _ in results]
        if task.kind == SCORED_BINARY:
            reports.append(scored_report(preds, task.id, wall_time_s=wall))
        else:
            reports.append(classification_report(preds, task.schema, wall_time_s=wall))
        for pred, raw in results:
            prediction_rows.append(
                {
                    "rep": rep,
                    "id": pred.record_id,
                    "gold": pred.gold,
                    "prediction": pred.predicted,
                    "unparsed": pred.unparsed,
                    "raw": raw,
                }
            )

    median = median_of_runs(reports)
    timing = TimingInfo(
        wall_time_s_per_rep=wall_times,
        wall_time_s_total=sum(wall_times),
        per_100_samples_s=[w * 100.0 / len(records) for w in wall_times],
    )
    report = RunReport(
        config_hash=cfg.config_hash(),
        repetitions=reports,
        median=median,
        timing=timing,
        out_dir=Path(out_dir) if out_dir else None,
        n_rejected=len(parsed.rejections),
    )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report_doc = {
            "format_version": 1,
            "config_hash": report.config_hash,
            "task": cfg.task,
            "mode": cfg.mode,
            "split": cfg.split,
            "n_records": len(records),
            "n_rejected": report.n_rejected,
            "repetitions": [r.to_json_dict() for r in reports],
            "median": median.to_json_dict(),
            "description_violations": {k: description_violations[k] for k in sorted(description_violations)},
        }
        write_atomic(out / "report.json", json.dumps(report_doc, indent=2, ensure_ascii=False) + "\n")
        write_atomic(
            out / "predictions.jsonl",
            "".join(json.dumps(row, ensure_ascii=False) + "\n" for row in prediction_rows),
        )
        trace_rows = [
            {"rep": i, **r.to_json_dict()} for i, r in enumerate(reports)
        ]
        write_atomic(
            out / "trace.jsonl",
            "".join(json.dumps(row, ensure_ascii=False) + "\n" for row in trace_rows),
        )
        lock_doc = dict(cfg.resolved_dict())
        lock_doc["config_hash"] = report.config_hash
        write_atomic(out / "config.lock.json", json.dumps(lock_doc, indent=2, sort_keys=True) + "\n")
        timing_doc = {
            "wall_time_s_per_rep": wall_times,
            "wall_time_s_total": timing.wall_time_s_total,
            "per_100_samples_s": timing.per_100_samples_s,
        }
        write_atomic(out / "timing.json", json.dumps(timing_doc, indent=2) + "\n")
    return report


def _read_meter(cmd: str) -> float:
    out = subprocess.run(cmd, shell=True, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def time_inference(cfg: RunConfig, n_samples: int) -> TimingReport:
    """Wall-clock n sequential inference calls, normalized per 100 samples.

    The cache is bypassed so every call hits the endpoint. When an energy
    meter command is configured it must print cumulative joules; energy is
    the before/after difference, otherwise it is reported as unavailable.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    task = get_task(cfg.task)
    if cfg.endpoint is None:
        raise ConfigError("run config needs an endpoint section")
    catalog = FeatureCatalog.from_json(cfg.catalog) if cfg.catalog else FeatureCatalog.default()
    parsed = parse_records(cfg.records, catalog, task=cfg.task, outlier_policy=cfg.outlier_policy)
    records = [r for r in parsed.records if r.split == cfg.split]
    if not records:
        raise RunError(f"no records with split {cfg.split!r} in {cfg.records}")

    client = ChatClient(cfg.endpoint)
    instruction = resolve_instruction(cfg, task)
    tokenizer = _tokenizer_for(cfg)
    prompts = []
    for i in range(n_samples):
        record = records[i % len(records)]
        prompt = build_record_prompt(record, task, cfg, catalog, client, instruction, tokenizer)
        # cycling a small fixture must not collapse into identical requests
        prompts.append(f"{prompt}\n\n[timing sample {i}]")

    before = _read_meter(cfg.energy_meter_cmd) if cfg.energy_meter_cmd else None
    start = time.perf_counter()
    for prompt in prompts:
        client.complete(
            InferenceRequest.user(
                cfg.endpoint.model,
                prompt,
                temperature=cfg.endpoint.temperature,
                max_new_tokens=cfg.endpoint.max_new_tokens,
            ),
            use_cache=False,
        )
    total = time.perf_counter() - start
    energy = None
    if before is not None:
        energy = _read_meter(cfg.energy_meter_cmd) - before
    return TimingReport(
        n_samples=n_samples,
        total_s=total,
        per_100_s=total * 100.0 / n_samples,
        energy_j=energy,
    )
