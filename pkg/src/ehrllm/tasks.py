"""Task registry: label schemas, gold-label parsing, prompt composition.

Four tasks are built in: smoking-status classification (5 classes),
clinical NLI (3 classes), sentence-similarity binarized at 3.0, and
in-hospital mortality as a scored binary outcome. Records carry task text
in their ``note`` field; sentence-pair tasks store both sentences there.
"""

from __future__ import annotations

from dataclasses import dataclass

from .client import LabelSchema
from .records import PatientRecord
from .serialize import ModelInput, TsRepresentation, assemble_input

MULTICLASS = "multiclass"
SCORED_BINARY = "scored-binary"

SIMILAR = "similar"
DISSIMILAR = "dissimilar"
SIMILARITY_THRESHOLD = 3.0


@dataclass(frozen=True)
class TaskSpec:
    """Everything the harness needs to run one prediction task."""

    id: str
    kind: str
    schema: LabelSchema
    description: str
    query: str
    allows_ts: bool = False
    positive_token: str = "yes"
    negative_token: str = "no"

    def gold(self, record: PatientRecord) -> str | int:
        """Interpret a record's raw label as this task's gold value."""
        label = record.label
        if self.kind == SCORED_BINARY:
            if label in (0, 1, "0", "1", False, True):
                return int(label)
            raise ValueError(f"record {record.id!r}: mortality label must be 0 or 1, got {label!r}")
        if self.id == "clinsts" and isinstance(label, (int, float)) and not isinstance(label, bool):
            return binarize_clinsts(float(label))
        if isinstance(label, str) and label in self.schema.labels:
            return label
        raise ValueError(f"record {record.id!r}: label {label!r} not valid for task {self.id!r}")


def binarize_clinsts(similarity: float) -> str:
    """Map a 0..5 similarity score to similar/dissimilar (strictly above 3.0)."""
    if not 0.0 <= similarity <= 5.0:
        raise ValueError(f"similarity {similarity!r} outside [0, 5]")
    return SIMILAR if similarity > SIMILARITY_THRESHOLD else DISSIMILAR


_SMOKING = TaskSpec(
    id="smoking",
    kind=MULTICLASS,
    schema=LabelSchema(
        task="smoking",
        labels=("Current smoker", "Past smoker", "Non-smoker", "Smoker", "Unknown"),
        aliases={
            "smoker unspecified": "Smoker",
            "current": "Current smoker",
            "past": "Past smoker",
            "former smoker": "Past smoker",
            "nonsmoker": "Non-smoker",
            "never smoked": "Non-smoker",
        },
        fallback="Unknown",
    ),
    description=(
        "Read the discharge summary and classify the patient's smoking status."
    ),
    query=(
        "Question: what is the patient's smoking status? Answer with exactly one of: "
        "Current smoker, Past smoker, Non-smoker, Smoker, Unknown."
    ),
)

_MEDNLI = TaskSpec(
    id="mednli",
    kind=MULTICLASS,
    schema=LabelSchema(
        task="mednli",
        labels=("Entailment", "Contradiction", "Neutral"),
        aliases={"entails": "Entailment", "contradicts": "Contradiction", "entailed": "Entailment"},
        fallback="Neutral",
    ),
    description=(
        "Given a clinical premise and a hypothesis, decide whether the hypothesis is "
        "entailed by, contradicts, or is neutral with respect to the premise."
    ),
    query=(
        "Question: what is the relation between premise and hypothesis? "
        "Answer with exactly one of: Entailment, Contradiction, Neutral."
    ),
)

_CLINSTS = TaskSpec(
    id="clinsts",
    kind=MULTICLASS,
    schema=LabelSchema(
        task="clinsts",
        labels=(SIMILAR, DISSIMILAR),
        aliases={"not similar": DISSIMILAR, "different": DISSIMILAR, "same meaning": SIMILAR},
        fallback=DISSIMILAR,
    ),
    description="Judge whether two sentences taken from clinical notes express the same meaning.",
    query=(
        "Question: are the two sentences semantically similar? "
        "Answer with exactly one of: similar, dissimilar."
    ),
)

_MORTALITY = TaskSpec(
    id="mortality",
    kind=SCORED_BINARY,
    schema=LabelSchema(
        task="mortality",
        labels=("yes", "no"),
        aliases={"died": "yes", "survived": "no", "deceased": "yes"},
        fallback="no",
    ),
    description=(
        "Assess the patient's risk of dying during this hospital admission from the "
        "admission note and the vital signs recorded over the first 48 hours."
    ),
    query=(
        "Question: will the patient die during this hospital stay? "
        "Answer yes or no, or give a probability between 0 and 1."
    ),
    allows_ts=True,
)

TASKS: dict[str, TaskSpec] = {t.id: t for t in (_SMOKING, _MEDNLI, _CLINSTS, _MORTALITY)}


def get_task(task_id: str) -> TaskSpec:
    try:
        return TASKS[task_id]
    except KeyError:
        raise KeyError(f"unknown task {task_id!r}; available: {sorted(TASKS)}") from None


def build_input(
    task: TaskSpec,
    record: PatientRecord,
    instruction: str | None = None,
    ts: TsRepresentation | None = None,
    include_note: bool = True,
) -> ModelInput:
    """Compose the full prompt for one record."""
    return assemble_input(
        instruction=instruction if instruction is not None else task.description,
        note=record.note if include_note else "",
        ts=ts if ts is not None else TsRepresentation.none(),
        query=task.query,
    )
