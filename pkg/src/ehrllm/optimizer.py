"""Instruction search: propose candidates with the LLM, select by metric.

Candidates are generated from strategy meta-prompts (persona, concise,
plain) and evaluated on growing development subsets with successive
halving: every candidate runs on the smallest rung, the top half advances
per rung, and the final-rung argmax wins (ties broken by lexicographically
smallest instruction text). Every evaluation lands in an append-only trace
and total endpoint calls never exceed the configured budget.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable, Sequence

from .client import ChatClient, InferenceRequest
from .metrics import PredictionRecord, compute_metric
from .records import PatientRecord
from .tasks import SCORED_BINARY, TaskSpec, build_input

log = logging.getLogger(__name__)

STRATEGIES = ("persona", "concise", "plain")
SEED_STRATEGY = "seed"

_META_ASSETS = {s: f"meta_prompt_{s}.txt" for s in STRATEGIES}


class OptimizationError(RuntimeError):
    """The search cannot start or finish under the given budget."""


@dataclass
class InstructionCandidate:
    """One candidate instruction and its evaluation history."""

    text: str
    strategy: str
    scores: list[tuple[str, float]] = field(default_factory=list)
    status: str = "pending"

    def __post_init__(self):
        if not self.text:
            raise ValueError("candidate text must be nonempty")

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class OptimizationBudget:
    """Search budget: candidate count, rung sizes, total endpoint calls."""

    n_candidates: int
    eval_calls_max: int
    rung_sizes: tuple[int, ...]
    metric: str = "micro_f1"

    def __post_init__(self):
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")
        if self.eval_calls_max < 1:
            raise ValueError("eval_calls_max must be >= 1")
        sizes = tuple(int(s) for s in self.rung_sizes)
        if not sizes or any(s < 1 for s in sizes):
            raise ValueError("rung_sizes must be nonempty positive integers")
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("rung_sizes must be strictly increasing")
        object.__setattr__(self, "rung_sizes", sizes)

    @classmethod
    def from_dict(cls, doc: dict) -> "OptimizationBudget":
        return cls(
            n_candidates=int(doc["n_candidates"]),
            eval_calls_max=int(doc["eval_calls_max"]),
            rung_sizes=tuple(doc["rung_sizes"]),
            metric=doc.get("metric", "micro_f1"),
        )


@dataclass
class OptimizationResult:
    best: InstructionCandidate
    candidates: list[InstructionCandidate]
    trace: list[dict]
    calls_used: int
    stopped_early: bool


def _meta_template(strategy: str) -> str:
    return resources.files(__package__).joinpath("assets", _META_ASSETS[strategy]).read_text("utf-8")


def format_examples(task: TaskSpec, records: Sequence[PatientRecord], limit: int = 3) -> str:
    lines = []
    for rec in records[:limit]:
        snippet = " ".join(rec.note.split())[:200]
        lines.append(f"Input: {snippet}\nLabel: {task.gold(rec)}")
    return "\n\n".join(lines) if lines else "(no examples)"


def propose_instructions(
    task: TaskSpec,
    train_records: Sequence[PatientRecord],
    n: int,
    strategies: Sequence[str],
    client: ChatClient,
) -> list[InstructionCandidate]:
    """Generate up to n deduplicated candidates, plus the seed instruction.

    One meta-prompt call per candidate, cycling through the strategies.
    The plain task description is always included as a ``seed`` candidate.
    Duplicate generations are dropped; a shortfall is logged, not fatal.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not strategies:
        raise ValueError("at least one strategy is required")
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        raise ValueError(f"unknown strategies {unknown}; available: {list(STRATEGIES)}")

    examples = format_examples(task, train_records)
    seed = InstructionCandidate(text=task.description, strategy=SEED_STRATEGY)
    out: list[InstructionCandidate] = [seed]
    seen = {seed.text}
    for i in range(n):
        strategy = strategies[i % len(strategies)]
        prompt = _meta_template(strategy).format(
            task_description=task.description, examples=examples, variant=i + 1
        )
        resp = client.complete(
            InferenceRequest.user(
                client.cfg.model,
                prompt,
                temperature=client.cfg.temperature,
                max_new_tokens=client.cfg.description_max_new_tokens,
            )
        )
        text = resp.text.strip()
        if text and text not in seen:
            seen.add(text)
            out.append(InstructionCandidate(text=text, strategy=strategy))
    generated = len(out) - 1
    if generated < n:
        log.warning("proposed only %d unique candidates of %d requested", generated, n)
    return out


def evaluate_candidate(
    cand: InstructionCandidate,
    subset: Sequence[PatientRecord],
    task: TaskSpec,
    client: ChatClient,
    metric: str,
    subset_id: str = "dev",
) -> float:
    """Score one candidate on a dev subset; appends to the candidate's history."""
    if not subset:
        raise ValueError("evaluation subset must be nonempty")
    preds: list[PredictionRecord] = []
    for rec in subset:
        prompt = build_input(task, rec, instruction=cand.text).render()
        if task.kind == SCORED_BINARY:
            scored = client.score(prompt, task.positive_token, task.negative_token)
            preds.append(PredictionRecord(rec.id, task.gold(rec), scored.value, scored.unparsed))
        else:
            result = client.classify(prompt, task.schema)
            preds.append(PredictionRecord(rec.id, task.gold(rec), result.label, result.unparsed))
    value = compute_metric(metric, preds, task.schema)
    cand.scores.append((subset_id, value))
    return value


def optimize(
    task: TaskSpec,
    records: Sequence[PatientRecord],
    budget: OptimizationBudget,
    client: ChatClient | None = None,
    seed: int = 0,
    strategies: Sequence[str] = STRATEGIES,
    propose: Callable[[], list[InstructionCandidate]] | None = None,
    evaluate: Callable[[InstructionCandidate, list[PatientRecord], int], float] | None = None,
) -> OptimizationResult:
    """Successive-halving search over candidate instructions.

    ``propose`` and ``evaluate`` default to the endpoint-backed paths and
    are injectable for scripted searches. Endpoint-call accounting charges
    one call per proposal and one per record evaluated; the search errors
    out if rung 0 cannot complete within ``eval_calls_max`` and otherwise
    stops early (selecting among completed rungs) when the budget would be
    exceeded.
    """
    dev = [r for r in records if r.split == "dev"]
    if budget.rung_sizes[-1] > len(dev):
        raise OptimizationError(
            f"last rung needs {budget.rung_sizes[-1]} dev records, only {len(dev)} available"
        )
    order = list(dev)
    random.Random(seed).shuffle(order)

    calls_used = 0
    if propose is None:
        if client is None:
            raise ValueError("optimize needs a client unless propose and evaluate are injected")
        train = [r for r in records if r.split == "train"]
        candidates = propose_instructions(task, train, budget.n_candidates, strategies, client)
        calls_used += budget.n_candidates
    else:
        candidates = propose()
    if not candidates:
        raise OptimizationError("no candidates to evaluate")

    if evaluate is None:
        if client is None:
            raise ValueError("optimize needs a client unless propose and evaluate are injected")

        def evaluate(cand: InstructionCandidate, subset: list[PatientRecord], rung: int) -> float:
            return evaluate_candidate(cand, subset, task, client, budget.metric, f"rung{rung}")

    trace: list[dict] = []
    survivors = list(candidates)
    last_scores: dict[str, float] = {}
    last_rung_members: list[InstructionCandidate] = list(candidates)
    stopped_early = False

    for rung, size in enumerate(budget.rung_sizes):
        needed = len(survivors) * size
        if calls_used + needed > budget.eval_calls_max:
            if rung == 0:
                raise OptimizationError(
                    f"budget of {budget.eval_calls_max} calls cannot complete rung 0 "
                    f"({needed} needed, {calls_used} already used)"
                )
            log.warning("stopping before rung %d: %d calls needed, %d remaining",
                        rung, needed, budget.eval_calls_max - calls_used)
            stopped_early = True
            break
        subset = order[:size]
        scores: dict[str, float] = {}
        for cand in survivors:
            value = evaluate(cand, subset, rung)
            calls_used += size
            scores[cand.hash] = value
            trace.append(
                {
                    "candidate_hash": cand.hash,
                    "strategy": cand.strategy,
                    "rung": rung,
                    "subset_size": size,
                    "metric": budget.metric,
                    "value": value,
                }
            )
        last_scores = scores
        last_rung_members = list(survivors)
        if rung < len(budget.rung_sizes) - 1:
            keep = math.ceil(len(survivors) / 2)
            survivors.sort(key=lambda c: (-scores[c.hash], c.text))
            for cand in survivors[keep:]:
                cand.status = "pruned"
            survivors = survivors[:keep]

    best = min(last_rung_members, key=lambda c: (-last_scores[c.hash], c.text))
    for cand in last_rung_members:
        if cand.status != "pruned":
            cand.status = "complete"
    return OptimizationResult(
        best=best,
        candidates=candidates,
        trace=trace,
        calls_used=calls_used,
        stopped_early=stopped_early,
    )
