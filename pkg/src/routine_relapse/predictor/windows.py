"""Weekly prediction samples over each patient's record."""

from __future__ import annotations

import datetime as dt
import logging
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

FEATURE_DAYS = 28
HORIZON_DAYS = 7
PRE_RELAPSE_DAYS = 28


@dataclass
class WindowSample:
    """One 28-day feature window ending at day ``end_day`` (1-based from the
    patient's first record date) and the 7 following prediction days."""

    patient_id: str
    end_day: int
    window_end: dt.date
    label: int
    age: float | None = None
    features: dict = field(default_factory=dict)
    flags: set = field(default_factory=set)

    @property
    def feature_days(self) -> range:
        return range(self.end_day - FEATURE_DAYS + 1, self.end_day + 1)

    @property
    def prediction_days(self) -> range:
        return range(self.end_day + 1, self.end_day + HORIZON_DAYS + 1)


def relapse_label(end_day: int, relapse_days, horizon: int = HORIZON_DAYS,
                  pre_days: int = PRE_RELAPSE_DAYS) -> int:
    """1 when days end+1..end+horizon touch any relapse's pre-period
    [r - pre_days + 1, r] (relapse day inclusive)."""
    lo, hi = end_day + 1, end_day + horizon
    return int(any(lo <= r and r - pre_days + 1 <= hi for r in relapse_days))


def window_ends(span: int, stride: int = 7, feature_days: int = FEATURE_DAYS,
                horizon: int = HORIZON_DAYS) -> list[int]:
    return list(range(feature_days, span - horizon + 1, stride))


def make_window_samples(cohort, stride: int = 7) -> list[WindowSample]:
    """Samples for every patient with at least 35 days of record span."""
    out = []
    for p in cohort:
        if not p.templates:
            log.info("%s: no templates; no samples", p.patient_id)
            continue
        start = p.templates[0].date
        span = (p.templates[-1].date - start).days + 1
        if span < FEATURE_DAYS + HORIZON_DAYS:
            log.info("%s: %d days observed, fewer than %d; no samples", p.patient_id, span,
                     FEATURE_DAYS + HORIZON_DAYS)
            continue
        relapse_days = [(r - start).days + 1 for r in p.relapse_events]
        for t in window_ends(span, stride):
            out.append(WindowSample(p.patient_id, t, start + dt.timedelta(days=t - 1),
                                    relapse_label(t, relapse_days), p.age))
    return out
