"""From-scratch evaluation metrics: confusion matrix, F1, AUROC, AUPRC.

AUROC is computed by rank summation with tied scores receiving their
average rank, which equals the pairwise-ordering statistic
(#(pos>neg) + 0.5*#(pos==neg)) / (P*N). AUPRC is average precision over
distinct thresholds (ties grouped), not trapezoidal interpolation.
Undefined metrics raise ``UndefinedMetricError`` and are reported as
first-class outcomes, never silent NaN.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field

from .client import LabelSchema


class UndefinedMetricError(ValueError):
    """A metric has no defined value for the given inputs."""

    def __init__(self, metric: str, reason: str):
        super().__init__(f"{metric} undefined: {reason}")
        self.metric = metric
        self.reason = reason


@dataclass
class PredictionRecord:
    """One scored record: gold vs predicted label or score."""

    record_id: str
    gold: object
    predicted: object
    unparsed: bool = False
    latency_ms: int = 0


@dataclass
class MetricsReport:
    """Evaluation summary for one run (or a median over runs).

    Classification runs carry ``confusion``/``macro_f1``/``micro_f1``;
    scored runs carry ``auroc``/``auprc``. Metrics stay in [0, 1]; percent
    scaling happens only at presentation time. ``undefined`` maps metric
    name to the reason it has no value.
    """

    task: str
    n: int
    labels: list[str] | None = None
    confusion: list[list[int]] | None = None
    macro_f1: float | None = None
    micro_f1: float | None = None
    auroc: float | None = None
    auprc: float | None = None
    unparsed_rate: float = 0.0
    wall_time_s: float | None = None
    undefined: dict[str, str] = field(default_factory=dict)

    def to_json_dict(self, include_timing: bool = False) -> dict:
        # fixed field order; timing is volatile and excluded from
        # reproducible artifacts
        out = {
            "task": self.task,
            "n": self.n,
            "labels": self.labels,
            "confusion": self.confusion,
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "auroc": self.auroc,
            "auprc": self.auprc,
            "unparsed_rate": self.unparsed_rate,
            "undefined": dict(sorted(self.undefined.items())),
        }
        if include_timing:
            out["wall_time_s"] = self.wall_time_s
        return out


def confusion_matrix(preds: list[PredictionRecord], schema: LabelSchema) -> list[list[int]]:
    """Count matrix over schema label order; cell [g][p] = gold g, predicted p."""
    index = {label: i for i, label in enumerate(schema.labels)}
    matrix = [[0] * len(schema.labels) for _ in schema.labels]
    for pred in preds:
        if pred.gold not in index:
            raise ValueError(f"gold label {pred.gold!r} not in schema for {schema.task!r}")
        if pred.predicted not in index:
            raise ValueError(f"predicted label {pred.predicted!r} not in schema for {schema.task!r}")
        matrix[index[pred.gold]][index[pred.predicted]] += 1
    return matrix


def f1_scores(confusion: list[list[int]], include_absent: bool = False) -> tuple[float, float]:
    """(macro_f1, micro_f1) from a confusion matrix.

    Per-class F1 is 2PR/(P+R); classes where P or R is undefined (0/0)
    contribute 0. Macro averages over classes present in gold unless
    ``include_absent`` is set. Micro pools tp/fp/fn, which for single-label
    multi-class equals accuracy.
    """
    n = sum(sum(row) for row in confusion)
    if n == 0:
        raise UndefinedMetricError("f1", "no predictions")
    k = len(confusion)
    f1s: list[float] = []
    total_tp = total_fp = total_fn = 0
    for i in range(k):
        tp = confusion[i][i]
        fn = sum(confusion[i]) - tp
        fp = sum(confusion[g][i] for g in range(k)) - tp
        total_tp += tp
        total_fp += fp
        total_fn += fn
        present = (tp + fn) > 0
        if not present and not include_absent:
            continue
        if tp + fp == 0 or tp + fn == 0:
            f1s.append(0.0)
            continue
        precision = tp / (tp + fp)
        recall = tp / (tp + fn)
        f1s.append(0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall))
    if not f1s:
        raise UndefinedMetricError("macro_f1", "no classes to average")
    macro = sum(f1s) / len(f1s)
    micro_p = total_tp / (total_tp + total_fp)
    micro_r = total_tp / (total_tp + total_fn)
    micro = 0.0 if micro_p + micro_r == 0 else 2 * micro_p * micro_r / (micro_p + micro_r)
    return macro, micro


def _average_ranks(scores: list[float]) -> list[float]:
    """1-based ranks of scores, ties sharing the average of their positions."""
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    ranks = [0.0] * len(scores)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        mean_rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def roc_auc(scored: list[tuple[float, int]]) -> float:
    """Area under the ROC curve for (score, binary label) pairs."""
    scores = [s for s, _ in scored]
    labels = [y for _, y in scored]
    pos = sum(labels)
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise UndefinedMetricError("auroc", "needs at least one positive and one negative")
    ranks = _average_ranks(scores)
    rank_sum = sum(r for r, y in zip(ranks, labels) if y == 1)
    return (rank_sum - pos * (pos + 1) / 2) / (pos * neg)


def pr_auc(scored: list[tuple[float, int]]) -> float:
    """Average precision over distinct score thresholds, ties grouped."""
    pos = sum(y for _, y in scored)
    if pos == 0:
        raise UndefinedMetricError("auprc", "needs at least one positive")
    ordered = sorted(scored, key=lambda p: -p[0])
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(ordered):
        j = i
        while j + 1 < len(ordered) and ordered[j + 1][0] == ordered[i][0]:
            j += 1
        for k in range(i, j + 1):
            if ordered[k][1] == 1:
                tp += 1
            else:
                fp += 1
        recall = tp / pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return ap


def compute_metric(metric: str, preds: list[PredictionRecord], schema: LabelSchema) -> float:
    """Dispatch a metric id over prediction records."""
    if metric in ("macro_f1", "micro_f1"):
        macro, micro = f1_scores(confusion_matrix(preds, schema))
        return macro if metric == "macro_f1" else micro
    if metric in ("auroc", "auprc"):
        pairs = [(float(p.predicted), int(p.gold)) for p in preds]
        return roc_auc(pairs) if metric == "auroc" else pr_auc(pairs)
    raise KeyError(f"unknown metric {metric!r}")


def classification_report(
    preds: list[PredictionRecord], schema: LabelSchema, wall_time_s: float | None = None
) -> MetricsReport:
    report = MetricsReport(task=schema.task, n=len(preds), labels=list(schema.labels))
    report.unparsed_rate = sum(p.unparsed for p in preds) / len(preds) if preds else 0.0
    report.wall_time_s = wall_time_s
    try:
        report.confusion = confusion_matrix(preds, schema)
        report.macro_f1, report.micro_f1 = f1_scores(report.confusion)
    except UndefinedMetricError as exc:
        report.undefined["macro_f1"] = exc.reason
        report.undefined["micro_f1"] = exc.reason
    return report


def scored_report(
    preds: list[PredictionRecord], task: str, wall_time_s: float | None = None
) -> MetricsReport:
    report = MetricsReport(task=task, n=len(preds))
    report.unparsed_rate = sum(p.unparsed for p in preds) / len(preds) if preds else 0.0
    report.wall_time_s = wall_time_s
    pairs = [(float(p.predicted), int(p.gold)) for p in preds]
    for name, fn in (("auroc", roc_auc), ("auprc", pr_auc)):
        try:
            value = fn(pairs)
        except UndefinedMetricError as exc:
            report.undefined[name] = exc.reason
            continue
        setattr(report, name, value)
    return report


def _median_field(reports: list[MetricsReport], name: str) -> float | None:
    values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
    return statistics.median(values) if values else None


def median_of_runs(reports: list[MetricsReport]) -> MetricsReport:
    """Per-metric median across repeated runs of the same experiment.

    Odd run counts take the middle value, even counts the mean of the two
    middle values. The confusion matrix carried for reference is the one
    from the run whose micro-F1 is the (lower) median.
    """
    if not reports:
        raise ValueError("median_of_runs needs at least one report")
    tasks = {r.task for r in reports}
    sizes = {r.n for r in reports}
    if len(tasks) > 1 or len(sizes) > 1:
        raise ValueError(f"reports disagree on task/n: tasks={sorted(tasks)} n={sorted(sizes)}")

    median = MetricsReport(task=reports[0].task, n=reports[0].n, labels=reports[0].labels)
    for name in ("macro_f1", "micro_f1", "auroc", "auprc", "unparsed_rate", "wall_time_s"):
        setattr(median, name, _median_field(reports, name))
    if median.unparsed_rate is None:
        median.unparsed_rate = 0.0
    for r in reports:
        for metric, reason in r.undefined.items():
            if getattr(median, metric, None) is None:
                median.undefined.setdefault(metric, reason)

    with_micro = [r for r in reports if r.micro_f1 is not None]
    if with_micro:
        ordered = sorted(with_micro, key=lambda r: r.micro_f1)
        reference = ordered[(len(ordered) - 1) // 2]
        median.confusion = reference.confusion
        median.labels = reference.labels
    return median
