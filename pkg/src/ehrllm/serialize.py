"""Render aggregated vitals as prompt text and assemble model inputs.

The numeric block is one line per feature, ``<display name>: v1, v2, ...``
for series and ``<display name>: v`` for statics. Values are rounded
half-even to two decimals with trailing zeros trimmed (always keeping one
decimal digit), so ``76.09``, ``69.0``, ``7.4`` and ``0.21`` all render as
written.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from importlib import resources
from typing import Sequence

from .aggregation import AggregatedSeries

log = logging.getLogger(__name__)

TS_NUMERIC = "numeric"
TS_DESCRIPTION = "description"
TS_NONE = "none"
TS_MODES = (TS_NUMERIC, TS_DESCRIPTION, TS_NONE)

DESCRIPTION_MARKER = "**[Insert Numeric Time-Series Data Here]**"
_DESCRIPTION_TEMPLATE_ASSET = "ts_description_prompt.txt"

MAX_DESCRIPTION_SENTENCES = 5

_SENTENCE_END = re.compile(r"[.!?](?=\s|$)")


class TemplateError(ValueError):
    """Prompt template is missing its insertion marker."""


@dataclass
class NumericBlock:
    text: str
    line_count: int


@dataclass(frozen=True)
class TsRepresentation:
    """Time-series slot of a model input: raw numbers, prose, or nothing."""

    mode: str
    payload: str

    def __post_init__(self):
        if self.mode not in TS_MODES:
            raise ValueError(f"unknown ts mode {self.mode!r}")
        if (self.mode == TS_NONE) != (self.payload == ""):
            raise ValueError("mode 'none' requires an empty payload and vice versa")

    @classmethod
    def none(cls) -> "TsRepresentation":
        return cls(TS_NONE, "")

    @classmethod
    def numeric(cls, block: NumericBlock) -> "TsRepresentation":
        return cls(TS_NUMERIC, block.text)

    @classmethod
    def description(cls, text: str) -> "TsRepresentation":
        return cls(TS_DESCRIPTION, text)


@dataclass(frozen=True)
class ModelInput:
    """Fully assembled prompt: instruction, note, time series, task query."""

    instruction: str
    note: str
    ts: TsRepresentation
    query: str

    def render(self) -> str:
        parts = [self.instruction, self.note]
        if self.ts.mode != TS_NONE:
            parts.append(self.ts.payload)
        parts.append(self.query)
        return "\n\n".join(p for p in parts if p)


@dataclass
class DescriptionCheck:
    """Advisory validation result for a generated time-series description."""

    sentence_count: int
    digit_count: int
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def format_value(value: float) -> str:
    """Format a number for the numeric block (half-even, 2 decimals, trimmed)."""
    quantized = Decimal(str(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN)
    text = format(quantized, "f").rstrip("0")
    if text.endswith("."):
        text += "0"
    return text


def render_numeric_block(series: Sequence[AggregatedSeries]) -> NumericBlock:
    """Render aggregated series into the one-line-per-feature block."""
    lines = []
    for s in series:
        if s.static_value is not None:
            lines.append(f"{s.display_name}: {format_value(s.static_value)}")
        else:
            lines.append(f"{s.display_name}: " + ", ".join(format_value(v) for v in s.bucket_means))
    return NumericBlock(text="\n".join(lines), line_count=len(lines))


def parse_numeric_block(text: str) -> list[tuple[str, list[float]]]:
    """Inverse of render_numeric_block, for round-trip checks and diffing."""
    out = []
    for line in text.splitlines():
        name, _, values = line.partition(": ")
        if not values:
            raise ValueError(f"unparseable block line: {line!r}")
        out.append((name, [float(v) for v in values.split(", ")]))
    return out


def default_description_template() -> str:
    return resources.files(__package__).joinpath("assets", _DESCRIPTION_TEMPLATE_ASSET).read_text("utf-8")


def build_description_prompt(block: NumericBlock, template: str | None = None) -> str:
    """Substitute the numeric block into the description-generation prompt."""
    if template is None:
        template = default_description_template()
    if DESCRIPTION_MARKER not in template:
        raise TemplateError(f"template does not contain the insertion marker {DESCRIPTION_MARKER!r}")
    if not block.text:
        log.warning("building a description prompt from an empty numeric block")
    return template.replace(DESCRIPTION_MARKER, block.text)


def validate_description(text: str) -> DescriptionCheck:
    """Check a generated description against the length and no-numbers rules.

    Sentences are counted by terminal punctuation (. ! ?) followed by
    whitespace or end of text; abbreviations may miscount. Violations are
    advisory: the text is never altered.
    """
    sentences = len(_SENTENCE_END.findall(text))
    digits = sum(c.isdigit() for c in text)
    violations = []
    if sentences > MAX_DESCRIPTION_SENTENCES:
        violations.append(f"too_many_sentences: {sentences} > {MAX_DESCRIPTION_SENTENCES}")
    if digits:
        violations.append(f"contains_digits: {digits} digit characters")
    return DescriptionCheck(sentence_count=sentences, digit_count=digits, violations=violations)


def assemble_input(instruction: str, note: str, ts: TsRepresentation, query: str) -> ModelInput:
    """Combine the prompt components in their fixed order."""
    return ModelInput(instruction=instruction, note=note, ts=ts, query=query)
