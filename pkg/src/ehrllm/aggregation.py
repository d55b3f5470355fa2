"""Reduce per-feature event streams to fixed-count bucket means.

The observation window (48 h by default) is split into B equal buckets;
each bucket holds the arithmetic mean of its events. Empty buckets are
imputed by carrying the nearest earlier observed bucket forward (leading
gaps back-fill from the first observed bucket). Sums use ``math.fsum`` so
results are exact regardless of event order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .records import STATIC, FeatureCatalog, PatientRecord, TimeSeriesEvent

FORWARD_FILL = "forward_fill"
OMIT_FEATURE = "omit_feature"
IMPUTATION_POLICIES = (FORWARD_FILL, OMIT_FEATURE)


@dataclass(frozen=True)
class AggregationConfig:
    """Bucketing parameters for the observation window.

    ``imputation`` selects what happens to missing data: ``forward_fill``
    imputes empty buckets from neighbours and omits only features with no
    events at all; ``omit_feature`` drops a feature entirely as soon as any
    bucket has no events.
    """

    window_hours: int = 48
    bucket_count: int = 6
    excluded_features: frozenset[str] = frozenset()
    imputation: str = FORWARD_FILL

    def __post_init__(self):
        if self.window_hours < 1:
            raise ValueError("window_hours must be >= 1")
        if self.bucket_count < 1:
            raise ValueError("bucket_count must be >= 1")
        if self.bucket_count > self.window_hours * 60:
            raise ValueError("bucket_count must not exceed window minutes")
        if self.imputation not in IMPUTATION_POLICIES:
            raise ValueError(f"unknown imputation policy {self.imputation!r}")
        # accept any iterable of feature ids
        object.__setattr__(self, "excluded_features", frozenset(self.excluded_features))

    @property
    def window_minutes(self) -> int:
        return self.window_hours * 60

    @classmethod
    def from_dict(cls, doc: dict) -> "AggregationConfig":
        return cls(
            window_hours=int(doc.get("window_hours", 48)),
            bucket_count=int(doc.get("bucket_count", 6)),
            excluded_features=frozenset(doc.get("excluded_features", ())),
            imputation=doc.get("imputation", FORWARD_FILL),
        )

    def to_dict(self) -> dict:
        return {
            "window_hours": self.window_hours,
            "bucket_count": self.bucket_count,
            "excluded_features": sorted(self.excluded_features),
            "imputation": self.imputation,
        }


@dataclass
class AggregatedSeries:
    """Bucket means for one feature, or a single value for a static one.

    ``observed[i]`` is True when bucket i was computed from at least one
    event and False when it was imputed. Static features carry
    ``static_value`` and empty bucket lists.
    """

    feature_id: str
    display_name: str
    bucket_means: list[float] = field(default_factory=list)
    observed: list[bool] = field(default_factory=list)
    static_value: float | None = None
    dropped_events: int = 0


def bucketize(
    events: list[TimeSeriesEvent], cfg: AggregationConfig, feature_id: str, display_name: str
) -> AggregatedSeries | None:
    """Reduce one feature's events to bucket means under the config.

    Bucket i covers offsets in [i*W/B, (i+1)*W/B) minutes; events at or
    beyond the window are discarded and counted in ``dropped_events``.
    Returns None when the feature is omitted under the imputation policy.
    """
    window = cfg.window_minutes
    b = cfg.bucket_count
    buckets: list[list[float]] = [[] for _ in range(b)]
    dropped = 0
    for event in events:
        if event.offset_minutes >= window:
            dropped += 1
            continue
        # integer arithmetic keeps half-open boundaries exact
        buckets[(event.offset_minutes * b) // window].append(event.value)

    observed = [bool(vals) for vals in buckets]
    if not any(observed):
        return None
    if cfg.imputation == OMIT_FEATURE and not all(observed):
        return None

    def mean_of(vals: list[float]) -> float:
        # projecting onto [min, max] corrects the <=1 ULP the division may add
        return min(max(math.fsum(vals) / len(vals), min(vals)), max(vals))

    means: list[float | None] = [mean_of(vals) if vals else None for vals in buckets]
    first_observed = observed.index(True)
    last_value = means[first_observed]
    for i in range(b):
        if means[i] is None:
            means[i] = last_value  # back-fill before first_observed, carry forward after
        else:
            last_value = means[i]

    return AggregatedSeries(
        feature_id=feature_id,
        display_name=display_name,
        bucket_means=means,  # type: ignore[arg-type]
        observed=observed,
        dropped_events=dropped,
    )


def aggregate_record(
    record: PatientRecord, catalog: FeatureCatalog, cfg: AggregationConfig
) -> list[AggregatedSeries]:
    """Aggregate every catalog feature of a record, in catalog order.

    Excluded features are absent from the output; static features pass
    their value through from the record's statics map. Features omitted by
    the imputation policy (or missing statics) produce no entry.
    """
    by_feature: dict[str, list[TimeSeriesEvent]] = {}
    for event in record.events:
        by_feature.setdefault(event.feature_id, []).append(event)

    out: list[AggregatedSeries] = []
    for spec in catalog:
        if spec.id in cfg.excluded_features:
            continue
        if spec.kind == STATIC:
            if spec.id in record.statics:
                out.append(
                    AggregatedSeries(
                        feature_id=spec.id,
                        display_name=spec.display_name,
                        static_value=record.statics[spec.id],
                    )
                )
            continue
        series = bucketize(by_feature.get(spec.id, []), cfg, spec.id, spec.display_name)
        if series is not None:
            out.append(series)
    return out
