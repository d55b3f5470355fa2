"""Patient record ingestion: JSONL parsing, unit conversion, outlier handling.

Records arrive as one JSON object per line with fields ``id``, ``note``,
``events`` (array of ``{feature, t_min, value, unit}``), ``statics``,
``label`` and ``split``. Parsing canonicalizes units and applies the
outlier policy, so downstream stages always see canonical, bounded values.
Malformed lines are collected into a rejection report instead of aborting
the whole file.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

log = logging.getLogger(__name__)

RECORD_FORMAT_VERSION = 1
CATALOG_FORMAT_VERSION = 1

SERIES = "series"
STATIC = "static"

SPLITS = ("train", "dev", "test")

CLAMP = "clamp"
DROP = "drop"
OUTLIER_POLICIES = (CLAMP, DROP)

_DEFAULT_CATALOG_ASSET = "default_catalog.json"


class CatalogError(ValueError):
    """Invalid feature catalog or feature spec."""


class UnknownUnitError(ValueError):
    """Event unit has no conversion entry for its feature."""


@dataclass(frozen=True)
class FeatureSpec:
    """One catalog entry: how a clinical feature is named, converted and bounded.

    ``conversions`` maps a source-unit string to an affine transform
    ``(scale, offset)`` into the canonical unit and must contain the
    identity entry for ``canonical_unit`` itself.
    """

    id: str
    display_name: str
    kind: str
    canonical_unit: str
    plausible_range: tuple[float, float]
    conversions: dict[str, tuple[float, float]]

    def __post_init__(self):
        if not self.id:
            raise CatalogError("feature id must be nonempty")
        if not self.display_name:
            raise CatalogError(f"feature {self.id!r}: display_name must be nonempty")
        if self.kind not in (SERIES, STATIC):
            raise CatalogError(f"feature {self.id!r}: kind must be series or static, got {self.kind!r}")
        lo, hi = self.plausible_range
        if not lo < hi:
            raise CatalogError(f"feature {self.id!r}: plausible_range must satisfy min < max")
        if self.canonical_unit not in self.conversions:
            raise CatalogError(f"feature {self.id!r}: conversions must include the canonical unit")
        scale, offset = self.conversions[self.canonical_unit]
        if (float(scale), float(offset)) != (1.0, 0.0):
            raise CatalogError(f"feature {self.id!r}: canonical-unit conversion must be the identity")


@dataclass(frozen=True)
class FeatureCatalog:
    """Ordered collection of feature specs; order defines rendering order."""

    features: tuple[FeatureSpec, ...]

    def __post_init__(self):
        ids = [f.id for f in self.features]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise CatalogError(f"duplicate feature ids: {dupes}")
        object.__setattr__(self, "_by_id", {f.id: f for f in self.features})

    def __iter__(self):
        return iter(self.features)

    def __len__(self):
        return len(self.features)

    def __contains__(self, feature_id: str):
        return feature_id in self._by_id

    def get(self, feature_id: str) -> FeatureSpec:
        try:
            return self._by_id[feature_id]
        except KeyError:
            raise KeyError(f"feature {feature_id!r} not in catalog") from None

    @classmethod
    def from_dict(cls, doc: dict) -> "FeatureCatalog":
        version = doc.get("format_version")
        if version != CATALOG_FORMAT_VERSION:
            raise CatalogError(f"unsupported catalog format_version: {version!r}")
        specs = []
        for entry in doc.get("features", []):
            specs.append(
                FeatureSpec(
                    id=entry["id"],
                    display_name=entry["display_name"],
                    kind=entry["kind"],
                    canonical_unit=entry["canonical_unit"],
                    plausible_range=(float(entry["plausible_range"][0]), float(entry["plausible_range"][1])),
                    conversions={u: (float(s), float(o)) for u, (s, o) in entry["conversions"].items()},
                )
            )
        return cls(features=tuple(specs))

    @classmethod
    def from_json(cls, path: str | Path) -> "FeatureCatalog":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "FeatureCatalog":
        data = resources.files(__package__).joinpath("assets", _DEFAULT_CATALOG_ASSET).read_text("utf-8")
        return cls.from_dict(json.loads(data))


@dataclass(frozen=True)
class TimeSeriesEvent:
    """One timestamped measurement, minutes since admission."""

    feature_id: str
    offset_minutes: int
    value: float
    unit: str

    def __post_init__(self):
        if self.offset_minutes < 0:
            raise ValueError(f"event for {self.feature_id!r}: offset_minutes must be >= 0")
        if not math.isfinite(self.value):
            raise ValueError(f"event for {self.feature_id!r}: value must be finite")


@dataclass
class PatientRecord:
    """One admission: note text, event stream, statics, gold label."""

    id: str
    note: str
    events: list[TimeSeriesEvent]
    statics: dict[str, float]
    label: object
    split: str

    def __post_init__(self):
        if not self.id:
            raise ValueError("record id must be nonempty")
        if self.split not in SPLITS:
            raise ValueError(f"record {self.id!r}: split must be one of {SPLITS}, got {self.split!r}")


@dataclass(frozen=True)
class Rejection:
    """One rejected input line and why."""

    line_no: int
    reason: str


@dataclass
class ParseResult:
    records: list[PatientRecord] = field(default_factory=list)
    rejections: list[Rejection] = field(default_factory=list)


def convert_units(event: TimeSeriesEvent, spec: FeatureSpec) -> TimeSeriesEvent:
    """Return the event expressed in the feature's canonical unit.

    Idempotent once the unit is canonical: the identity conversion is
    short-circuited so values are returned bit-for-bit unchanged.
    """
    try:
        scale, offset = spec.conversions[event.unit]
    except KeyError:
        raise UnknownUnitError(
            f"feature {spec.id!r}: no conversion from unit {event.unit!r}"
        ) from None
    if event.unit == spec.canonical_unit:
        return event
    return replace(event, value=scale * event.value + offset, unit=spec.canonical_unit)


def clamp_outliers(
    event: TimeSeriesEvent, spec: FeatureSpec, policy: str = CLAMP
) -> TimeSeriesEvent | None:
    """Apply the outlier policy to an event already in canonical units.

    Under ``clamp`` the value is projected onto the plausible range; under
    ``drop`` an out-of-range event returns None (removal marker). In-range
    events pass through unchanged.
    """
    if policy not in OUTLIER_POLICIES:
        raise ValueError(f"unknown outlier policy {policy!r}")
    lo, hi = spec.plausible_range
    if lo <= event.value <= hi:
        return event
    if policy == DROP:
        return None
    return replace(event, value=min(max(event.value, lo), hi))


def _coerce_value(raw) -> float:
    if isinstance(raw, bool):
        raise ValueError("boolean is not a measurement value")
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError("non-finite value")
    return value


def _parse_line(obj: dict, catalog: FeatureCatalog, policy: str, gold_check) -> PatientRecord:
    version = obj.get("format_version", RECORD_FORMAT_VERSION)
    if version != RECORD_FORMAT_VERSION:
        raise ValueError(f"unsupported record format_version: {version!r}")

    rec_id = obj.get("id")
    if not isinstance(rec_id, str) or not rec_id:
        raise ValueError("missing or empty field 'id'")
    note = obj.get("note")
    if not isinstance(note, str):
        raise ValueError("missing field 'note'")
    if "label" not in obj or obj["label"] is None:
        raise ValueError("missing field 'label'")
    split = obj.get("split")
    if split not in SPLITS:
        raise ValueError(f"missing or invalid field 'split': {split!r}")

    raw_events = obj.get("events", [])
    if not isinstance(raw_events, list) or any(not isinstance(e, dict) for e in raw_events):
        raise ValueError("field 'events' must be an array of objects")
    raw_statics = obj.get("statics") or {}
    if not isinstance(raw_statics, dict):
        raise ValueError("field 'statics' must be an object")

    events: list[TimeSeriesEvent] = []
    for raw in raw_events:
        fid = raw.get("feature")
        if fid not in catalog:
            raise ValueError(f"unknown feature {fid!r}")
        spec = catalog.get(fid)
        offset = raw.get("t_min")
        if isinstance(offset, bool) or not isinstance(offset, int) or offset < 0:
            raise ValueError(f"feature {fid!r}: invalid t_min {offset!r}")
        try:
            value = _coerce_value(raw.get("value"))
        except (TypeError, ValueError):
            raise ValueError(f"feature {fid!r}: non-finite or invalid value {raw.get('value')!r}") from None
        unit = raw.get("unit")
        if not isinstance(unit, str):
            raise ValueError(f"feature {fid!r}: missing unit")
        event = convert_units(TimeSeriesEvent(fid, offset, value, unit), spec)
        kept = clamp_outliers(event, spec, policy)
        if kept is not None:
            events.append(kept)

    statics: dict[str, float] = {}
    for fid, raw in raw_statics.items():
        if fid not in catalog:
            raise ValueError(f"unknown static feature {fid!r}")
        spec = catalog.get(fid)
        if spec.kind != STATIC:
            raise ValueError(f"feature {fid!r} is not a static feature")
        try:
            value = _coerce_value(raw)
        except (TypeError, ValueError):
            raise ValueError(f"static {fid!r}: non-finite or invalid value {raw!r}") from None
        lo, hi = spec.plausible_range
        if lo <= value <= hi:
            statics[fid] = value
        elif policy == CLAMP:
            statics[fid] = min(max(value, lo), hi)
        # drop: out-of-range static is omitted

    record = PatientRecord(
        id=rec_id, note=note, events=events, statics=statics, label=obj["label"], split=split
    )
    if gold_check is not None:
        gold_check(record)  # raises ValueError on an uninterpretable label
    return record


def parse_records(
    path: str | Path,
    catalog: FeatureCatalog,
    task: str | None = None,
    outlier_policy: str = CLAMP,
) -> ParseResult:
    """Parse a JSONL record file into canonical PatientRecords.

    Every non-blank input line becomes exactly one record or one rejection,
    so ``len(records) + len(rejections)`` equals the number of non-blank
    lines. Events are unit-converted and outlier-handled here; when
    ``task`` is given, each record's label must parse as a gold label for
    that task.
    """
    if outlier_policy not in OUTLIER_POLICIES:
        raise ValueError(f"unknown outlier policy {outlier_policy!r}")
    gold_check = None
    if task is not None:
        from .tasks import get_task  # local import: tasks layers on top of records

        gold_check = get_task(task).gold

    result = ParseResult()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("line is not a JSON object")
                result.records.append(_parse_line(obj, catalog, outlier_policy, gold_check))
            except ValueError as exc:
                result.rejections.append(Rejection(line_no, f"line {line_no}: {exc}"))
    if result.rejections:
        log.warning("%s: rejected %d of %d lines", path, len(result.rejections),
                    len(result.records) + len(result.rejections))
    return result


def record_to_json(record: PatientRecord) -> dict:
    """Serialize a record back to the line format (canonical units)."""
    return {
        "format_version": RECORD_FORMAT_VERSION,
        "id": record.id,
        "note": record.note,
        "events": [
            {"feature": e.feature_id, "t_min": e.offset_minutes, "value": e.value, "unit": e.unit}
            for e in record.events
        ],
        "statics": dict(record.statics),
        "label": record.label,
        "split": record.split,
    }
