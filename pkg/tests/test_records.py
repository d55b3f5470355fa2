"""Record parsing, unit conversion and outlier handling."""

from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ehrllm.records import (
    CatalogError,
    FeatureCatalog,
    FeatureSpec,
    TimeSeriesEvent,
    UnknownUnitError,
    clamp_outliers,
    convert_units,
    parse_records,
    record_to_json,
)


def write_lines(tmp_path, lines):
    path = tmp_path / "records.jsonl"
    path.write_text("".join(line + "\n" for line in lines), "utf-8")
    return path


def make_line(**overrides):
    doc = {
        "format_version": 1,
        "id": "r1",
        "note": "pt admitted",
        "events": [{"feature": "heart_rate", "t_min": 30, "value": 76.0, "unit": "bpm"}],
        "statics": {},
        "label": "0",
        "split": "test",
    }
    doc.update(overrides)
    return json.dumps(doc)


# --- parse_records ----------------------------------------------------------


def test_single_well_formed_line(tmp_path, catalog):
    result = parse_records(write_lines(tmp_path, [make_line()]), catalog)
    assert len(result.records) == 1
    assert not result.rejections
    record = result.records[0]
    assert record.note == "pt admitted"
    assert len(record.events) == 1
    assert record.events[0].value == 76.0
    assert record.events[0].unit == "bpm"


def test_empty_file(tmp_path, catalog):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    result = parse_records(path, catalog)
    assert result.records == []
    assert result.rejections == []


def test_nan_value_rejected_with_line_number(tmp_path, catalog):
    bad = make_line(events=[{"feature": "heart_rate", "t_min": 30, "value": "NaN", "unit": "bpm"}])
    result = parse_records(write_lines(tmp_path, [bad]), catalog)
    assert result.records == []
    assert len(result.rejections) == 1
    assert result.rejections[0].line_no == 1
    assert "line 1" in result.rejections[0].reason


def test_unknown_feature_rejected(tmp_path, catalog):
    bad = make_line(events=[{"feature": "shoe_size", "t_min": 0, "value": 42, "unit": "eu"}])
    result = parse_records(write_lines(tmp_path, [bad]), catalog)
    assert not result.records
    assert "shoe_size" in result.rejections[0].reason


def test_unknown_unit_rejected(tmp_path, catalog):
    bad = make_line(events=[{"feature": "glucose", "t_min": 0, "value": 100, "unit": "furlongs"}])
    result = parse_records(write_lines(tmp_path, [bad]), catalog)
    assert not result.records
    assert "furlongs" in result.rejections[0].reason


def test_bad_format_version_rejected(tmp_path, catalog):
    result = parse_records(write_lines(tmp_path, [make_line(format_version=99)]), catalog)
    assert not result.records
    assert "format_version" in result.rejections[0].reason


def test_invalid_json_rejected(tmp_path, catalog):
    result = parse_records(write_lines(tmp_path, ["{not json"]), catalog)
    assert len(result.rejections) == 1


def test_blank_lines_are_not_input_lines(tmp_path, catalog):
    path = write_lines(tmp_path, [make_line(), "", "   ", make_line(id="r2")])
    result = parse_records(path, catalog)
    assert len(result.records) == 2
    assert not result.rejections


def test_record_plus_rejection_count_equals_line_count(tmp_path, catalog):
    lines = [
        make_line(id="a"),
        "garbage",
        make_line(id="b", events=[{"feature": "nope", "t_min": 0, "value": 1, "unit": "x"}]),
        make_line(id="c"),
        json.dumps({"id": "d"}),
    ]
    result = parse_records(write_lines(tmp_path, lines), catalog)
    assert len(result.records) + len(result.rejections) == len(lines)
    assert len(result.records) == 2


def test_wrong_container_types_are_rejections_not_crashes(tmp_path, catalog):
    lines = [
        make_line(id="a", events="not a list"),
        make_line(id="b", events=[["not", "a", "dict"]]),
        make_line(id="c", statics=["not", "a", "dict"]),
        json.dumps(42),
        make_line(id="d"),
    ]
    result = parse_records(write_lines(tmp_path, lines), catalog)
    assert len(result.records) == 1
    assert len(result.rejections) == 4


def test_parsed_events_are_canonical_and_clamped(tmp_path, catalog):
    line = make_line(
        events=[
            {"feature": "temperature", "t_min": 5, "value": 98.6, "unit": "F"},
            {"feature": "heart_rate", "t_min": 6, "value": 4000, "unit": "bpm"},
        ]
    )
    result = parse_records(write_lines(tmp_path, [line]), catalog)
    temp, hr = result.records[0].events
    assert temp.unit == "C"
    assert temp.value == pytest.approx(37.0, abs=1e-9)
    assert hr.value == 300  # clamped to the plausible maximum


def test_drop_policy_removes_out_of_range_events(tmp_path, catalog):
    line = make_line(
        events=[
            {"feature": "heart_rate", "t_min": 0, "value": 4000, "unit": "bpm"},
            {"feature": "heart_rate", "t_min": 1, "value": 80, "unit": "bpm"},
        ]
    )
    result = parse_records(write_lines(tmp_path, [line]), catalog, outlier_policy="drop")
    assert [e.value for e in result.records[0].events] == [80]


def test_statics_must_be_static_features(tmp_path, catalog):
    result = parse_records(write_lines(tmp_path, [make_line(statics={"heart_rate": 80})]), catalog)
    assert not result.records
    assert "static" in result.rejections[0].reason


def test_task_label_validation(tmp_path, catalog):
    good = make_line(label="Entailment")
    bad = make_line(id="r2", label="Perhaps")
    result = parse_records(write_lines(tmp_path, [good, bad]), catalog, task="mednli")
    assert len(result.records) == 1
    assert len(result.rejections) == 1


def test_record_to_json_round_trips(tmp_path, catalog):
    path = write_lines(tmp_path, [make_line()])
    record = parse_records(path, catalog).records[0]
    again = write_lines(tmp_path, [json.dumps(record_to_json(record))])
    record2 = parse_records(again, catalog).records[0]
    assert record2 == record


# --- convert_units ----------------------------------------------------------


def test_fahrenheit_to_celsius():
    spec = FeatureCatalog.default().get("temperature")
    event = TimeSeriesEvent("temperature", 0, 98.6, "F")
    converted = convert_units(event, spec)
    assert converted.unit == "C"
    assert converted.value == pytest.approx(37.0, abs=1e-9)


def test_identity_conversion_is_unchanged_and_idempotent():
    spec = FeatureCatalog.default().get("heart_rate")
    event = TimeSeriesEvent("heart_rate", 0, 76.0, "bpm")
    once = convert_units(event, spec)
    assert once == event
    assert convert_units(once, spec) == once


def test_unknown_unit_error_names_feature_and_unit():
    spec = FeatureCatalog.default().get("glucose")
    event = TimeSeriesEvent("glucose", 0, 100.0, "furlongs")
    with pytest.raises(UnknownUnitError, match="glucose.*furlongs"):
        convert_units(event, spec)


@given(st.floats(min_value=-500, max_value=500))
def test_convert_is_idempotent_once_canonical(value):
    spec = FeatureCatalog.default().get("temperature")
    event = convert_units(TimeSeriesEvent("temperature", 0, value, "F"), spec)
    assert convert_units(event, spec) == event


# --- clamp_outliers ---------------------------------------------------------

HR_SPEC = FeatureSpec(
    id="heart_rate", display_name="heart rate", kind="series",
    canonical_unit="bpm", plausible_range=(0.0, 300.0), conversions={"bpm": (1.0, 0.0)},
)


def test_clamp_in_range_passthrough():
    event = TimeSeriesEvent("heart_rate", 0, 76.0, "bpm")
    assert clamp_outliers(event, HR_SPEC, "clamp") == event


def test_clamp_projects_onto_bound():
    event = TimeSeriesEvent("heart_rate", 0, 4000.0, "bpm")
    assert clamp_outliers(event, HR_SPEC, "clamp").value == 300.0


def test_drop_returns_removal_marker():
    event = TimeSeriesEvent("heart_rate", 0, 4000.0, "bpm")
    assert clamp_outliers(event, HR_SPEC, "drop") is None


@given(st.floats(allow_nan=False, allow_infinity=False, width=32))
def test_clamp_output_always_in_range_and_idempotent(value):
    event = TimeSeriesEvent("heart_rate", 0, float(value), "bpm")
    clamped = clamp_outliers(event, HR_SPEC, "clamp")
    lo, hi = HR_SPEC.plausible_range
    assert lo <= clamped.value <= hi
    assert clamp_outliers(clamped, HR_SPEC, "clamp") == clamped


# --- catalog invariants -----------------------------------------------------


def test_default_catalog_order_and_kinds(catalog):
    names = [f.display_name for f in catalog]
    assert names == [
        "heart rate", "respiratory rate", "systolic blood pressure",
        "diastolic blood pressure", "mean blood pressure", "oxygen saturation",
        "temperature", "glucose", "Glasgow coma scale total", "ph",
        "fraction inspired oxygen", "weight", "height",
    ]
    assert [f.kind for f in catalog].count("static") == 2
    assert len(catalog) == 13


def test_catalog_rejects_duplicate_ids():
    spec = HR_SPEC
    with pytest.raises(CatalogError, match="duplicate"):
        FeatureCatalog(features=(spec, spec))


def test_spec_rejects_bad_range():
    with pytest.raises(CatalogError, match="min"):
        FeatureSpec(id="x", display_name="x", kind="series", canonical_unit="u",
                    plausible_range=(5.0, 5.0), conversions={"u": (1.0, 0.0)})


def test_spec_requires_identity_conversion():
    with pytest.raises(CatalogError, match="identity"):
        FeatureSpec(id="x", display_name="x", kind="series", canonical_unit="u",
                    plausible_range=(0.0, 1.0), conversions={"u": (2.0, 0.0)})
    with pytest.raises(CatalogError, match="canonical"):
        FeatureSpec(id="x", display_name="x", kind="series", canonical_unit="u",
                    plausible_range=(0.0, 1.0), conversions={"v": (1.0, 0.0)})


def test_catalog_json_round_trip(tmp_path, catalog):
    import json as _json
    from ehrllm.records import CATALOG_FORMAT_VERSION

    doc = {
        "format_version": CATALOG_FORMAT_VERSION,
        "features": [
            {
                "id": f.id,
                "display_name": f.display_name,
                "kind": f.kind,
                "canonical_unit": f.canonical_unit,
                "plausible_range": list(f.plausible_range),
                "conversions": {u: list(c) for u, c in f.conversions.items()},
            }
            for f in catalog
        ],
    }
    path = tmp_path / "catalog.json"
    path.write_text(_json.dumps(doc), "utf-8")
    assert FeatureCatalog.from_json(path) == catalog
