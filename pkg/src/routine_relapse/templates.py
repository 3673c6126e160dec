"""Daily templates: hourly modality grids built from raw sensing observations.

A template is a ``(n_modalities, 24)`` grid for one patient-day.  Flattening is
modality-major: entry ``(m, h)`` lands at index ``m * 24 + h``.  Missing hours
are masked and hold 0, which is also the value clustering sees.
"""

from __future__ import annotations

import datetime as dt
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .registry import N_HOURS, ModalityRegistry, default_registry

log = logging.getLogger(__name__)

N_EMA_ITEMS = 10
RELAPSE_MERGE_DAYS = 28
MOBILITY_SERIES = ("distance_from_home", "total_movement", "time_in_location", "time_at_home")


class IngestError(ValueError):
    """Raised for malformed input rows (bad timestamps, non-finite values)."""


def parse_timestamp(text) -> dt.datetime:
    if isinstance(text, dt.datetime):
        return text
    try:
        return dt.datetime.fromisoformat(str(text).strip())
    except ValueError:
        raise IngestError(f"malformed timestamp {text!r}") from None


@dataclass(frozen=True)
class RawObservation:
    patient_id: str
    start: dt.datetime
    end: dt.datetime
    modality: str
    value: float

    def __post_init__(self):
        object.__setattr__(self, "start", parse_timestamp(self.start))
        object.__setattr__(self, "end", parse_timestamp(self.end))
        if self.end < self.start:
            raise IngestError(f"observation ends before it starts: {self.start} > {self.end}")
        if not math.isfinite(float(self.value)):
            raise IngestError(f"non-finite value {self.value!r} for {self.modality}")
        object.__setattr__(self, "value", float(self.value))


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class DailyTemplate:
    patient_id: str
    date: dt.date
    values: np.ndarray
    missing_mask: np.ndarray

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        mask = _frozen(self.missing_mask, bool)
        if values.ndim != 2 or values.shape[1] != N_HOURS or values.shape != mask.shape:
            raise ValueError(f"template must be (n_modalities, 24), got {values.shape} / {mask.shape}")
        if np.any(values[mask] != 0):
            raise ValueError("masked entries must hold 0")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing_mask", mask)

    def flatten(self) -> np.ndarray:
        return self.values.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, DailyTemplate):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.date == other.date
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.missing_mask, other.missing_mask)
        )

    __hash__ = None


def flatten(values: np.ndarray) -> np.ndarray:
    """Modality-major flattening of one grid or a stack of grids."""
    values = np.asarray(values)
    return values.reshape(values.shape[:-2] + (values.shape[-2] * values.shape[-1],))


def unflatten(vec: np.ndarray, n_modalities: int) -> np.ndarray:
    vec = np.asarray(vec)
    return vec.reshape(vec.shape[:-1] + (n_modalities, N_HOURS))


def _dict_of_arrays_equal(a: dict, b: dict) -> bool:
    if a.keys() != b.keys():
        return False
    return all(np.array_equal(a[k], b[k], equal_nan=True) for k in a)


@dataclass(frozen=True, eq=False)
class PatientRecord:
    patient_id: str
    age: float | None = None
    education_years: float | None = None
    templates: tuple[DailyTemplate, ...] = ()
    ema: dict = field(default_factory=dict)
    relapse_events: tuple[dt.date, ...] = ()
    mobility: dict = field(default_factory=dict)

    def __post_init__(self):
        templates = tuple(self.templates)
        dates = [t.date for t in templates]
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise ValueError(f"{self.patient_id}: template dates must be strictly increasing")
        if self.age is not None and not self.age > 0:
            raise ValueError(f"{self.patient_id}: age must be positive")
        ema = {}
        for day, items in self.ema.items():
            items = _frozen(items, np.float64)
            if items.shape != (N_EMA_ITEMS,):
                raise ValueError(f"{self.patient_id}: EMA on {day} has {items.size} items, expected 10")
            ema[day] = items
        mobility = {day: _frozen(v, np.float64) for day, v in self.mobility.items()}
        object.__setattr__(self, "templates", templates)
        object.__setattr__(self, "ema", dict(sorted(ema.items())))
        object.__setattr__(self, "mobility", dict(sorted(mobility.items())))
        object.__setattr__(self, "relapse_events", merge_relapse_events(self.relapse_events, self.patient_id))

    @property
    def dates(self) -> list[dt.date]:
        return [t.date for t in self.templates]

    def stack(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.templates:
            return np.zeros((0, 0, N_HOURS)), np.zeros((0, 0, N_HOURS), bool)
        return (np.stack([t.values for t in self.templates]),
                np.stack([t.missing_mask for t in self.templates]))

    def __eq__(self, other):
        if not isinstance(other, PatientRecord):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.age == other.age
            and self.education_years == other.education_years
            and self.templates == other.templates
            and self.relapse_events == other.relapse_events
            and _dict_of_arrays_equal(self.ema, other.ema)
            and _dict_of_arrays_equal(self.mobility, other.mobility)
        )

    __hash__ = None


def merge_relapse_events(dates: Iterable[dt.date], patient_id: str = "") -> tuple[dt.date, ...]:
    """Collapse relapse dates that fall within 28 days of the previous kept event."""
    kept: list[dt.date] = []
    for day in sorted(set(dates)):
        if kept and (day - kept[-1]).days <= RELAPSE_MERGE_DAYS:
            log.info("%s: relapse on %s merged into event of %s", patient_id, day, kept[-1])
            continue
        kept.append(day)
    return tuple(kept)


@dataclass(frozen=True)
class Cohort:
    patients: tuple[PatientRecord, ...] = ()

    def __post_init__(self):
        patients = tuple(sorted(self.patients, key=lambda p: p.patient_id))
        ids = [p.patient_id for p in patients]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate patient ids in cohort")
        object.__setattr__(self, "patients", patients)

    def __len__(self) -> int:
        return len(self.patients)

    def __iter__(self):
        return iter(self.patients)

    def patient(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)

    @property
    def n_days(self) -> int:
        return sum(len(p.templates) for p in self.patients)

    def day_index(self) -> pd.DataFrame:
        """One row per template, in cohort order: patient_id, date."""
        rows = [(p.patient_id, t.date) for p in self.patients for t in p.templates]
        return pd.DataFrame(rows, columns=["patient_id", "date"])

    def stack(self) -> tuple[np.ndarray, np.ndarray]:
        """All templates as ``(n_days, n_modalities, 24)`` values and mask arrays."""
        values = [t.values for p in self.patients for t in p.templates]
        masks = [t.missing_mask for p in self.patients for t in p.templates]
        if not values:
            n_mod = len(default_registry())
            return np.zeros((0, n_mod, N_HOURS)), np.zeros((0, n_mod, N_HOURS), bool)
        return np.stack(values), np.stack(masks)


# ---------------------------------------------------------------------------
# template construction
# ---------------------------------------------------------------------------

def _hour_span(start_h: float, end_h: float) -> tuple[int, int]:
    first = int(math.floor(start_h))
    last = max(first + 1, int(math.ceil(end_h)))
    return first, last


def build_daily_template(day_rows: Sequence[RawObservation], registry: ModalityRegistry | None = None,
                         date: dt.date | None = None, patient_id: str | None = None) -> DailyTemplate:
    """Aggregate one patient-day of observations into an hourly grid.

    Additive modalities (totals such as distance or durations) are split evenly
    over the hours an observation spans and summed within an hour, so the day
    total is conserved.  Intensity modalities (light, sound, acceleration) are
    copied to every spanned hour and averaged within an hour.  Observations
    running past midnight are truncated at the day boundary.
    """
    registry = registry or default_registry()
    if date is None or patient_id is None:
        if not day_rows:
            raise ValueError("date and patient_id are required for an empty day")
        date = date or day_rows[0].start.date()
        patient_id = patient_id or day_rows[0].patient_id
    n_mod = len(registry)
    sums = np.zeros((n_mod, N_HOURS))
    counts = np.zeros((n_mod, N_HOURS))
    midnight = dt.datetime.combine(date, dt.time())
    for row in day_rows:
        if row.patient_id != patient_id or row.start.date() != date:
            raise ValueError(f"row {row} does not belong to {patient_id} on {date}")
        m = registry.index(row.modality)
        start_h = (row.start - midnight).total_seconds() / 3600.0
        end_h = (row.end - midnight).total_seconds() / 3600.0
        if end_h > N_HOURS:
            log.warning("%s %s: %s observation runs past midnight; truncated", patient_id, date, row.modality)
            end_h = float(N_HOURS)
        first, last = _hour_span(start_h, end_h)
        last = min(last, N_HOURS)
        share = row.value / (last - first) if registry.is_additive(row.modality) else row.value
        sums[m, first:last] += share
        counts[m, first:last] += 1
    return _finish_template(patient_id, date, sums, counts, registry)


def _finish_template(patient_id, date, sums, counts, registry) -> DailyTemplate:
    additive = np.array([registry.is_additive(n) for n in registry.names])
    values = np.where(additive[:, None], sums, sums / np.maximum(counts, 1))
    mask = counts == 0
    values[mask] = 0.0
    return DailyTemplate(patient_id, date, values, mask)


def ingest_observations(rows: Iterable[RawObservation], registry: ModalityRegistry | None = None,
                        rejected: list | None = None) -> Cohort:
    """Group observations by patient and calendar day and build templates.

    Rows naming a modality outside the registry are skipped; a diagnostic is
    logged and appended to ``rejected`` when a list is given.
    """
    registry = registry or default_registry()
    by_day: dict[tuple[str, dt.date], list[RawObservation]] = defaultdict(list)
    for row in rows:
        if row.modality not in registry:
            msg = f"rejected row for {row.patient_id} at {row.start}: unknown modality {row.modality!r}"
            log.warning(msg)
            if rejected is not None:
                rejected.append(msg)
            continue
        by_day[(row.patient_id, row.start.date())].append(row)
    per_patient: dict[str, list[DailyTemplate]] = defaultdict(list)
    for (pid, day) in sorted(by_day):
        per_patient[pid].append(build_daily_template(by_day[(pid, day)], registry, day, pid))
    return Cohort(tuple(PatientRecord(pid, templates=tuple(ts)) for pid, ts in per_patient.items()))


def templates_from_frame(frame: pd.DataFrame, registry: ModalityRegistry | None = None,
                         rejected: list | None = None) -> dict[str, list[DailyTemplate]]:
    """Vectorized twin of :func:`ingest_observations` for large observation tables.

    ``frame`` has columns patient_id, start, end, modality, value.  Semantics
    match :func:`build_daily_template` row for row.
    """
    registry = registry or default_registry()
    if frame.empty:
        return {}
    frame = frame.reset_index(drop=True)
    known = frame["modality"].isin(registry.names)
    if not known.all():
        for _, row in frame[~known].iterrows():
            msg = f"rejected row for {row.patient_id} at {row.start}: unknown modality {row.modality!r}"
            log.warning(msg)
            if rejected is not None:
                rejected.append(msg)
        frame = frame[known].reset_index(drop=True)
    try:
        start = pd.to_datetime(frame["start"], format="ISO8601")
        end = pd.to_datetime(frame["end"], format="ISO8601")
    except (ValueError, TypeError) as exc:
        raise IngestError(f"malformed timestamp: {exc}") from None
    values = frame["value"].to_numpy(np.float64)
    if not np.all(np.isfinite(values)):
        raise IngestError("non-finite observation value")
    if (end < start).any():
        raise IngestError("observation ends before it starts")
    day = start.dt.normalize()
    start_h = ((start - day) / pd.Timedelta(hours=1)).to_numpy()
    end_h = ((end - day) / pd.Timedelta(hours=1)).to_numpy()
    if (end_h > N_HOURS).any():
        log.warning("%d observations run past midnight; truncated", int((end_h > N_HOURS).sum()))
        end_h = np.minimum(end_h, N_HOURS)
    first = np.floor(start_h).astype(np.int64)
    last = np.minimum(np.maximum(first + 1, np.ceil(end_h).astype(np.int64)), N_HOURS)
    span = last - first
    mod = frame["modality"].map(registry.index).to_numpy(np.int64)
    additive = np.array([registry.is_additive(n) for n in registry.names])
    share = np.where(additive[mod], values / span, values)

    keys = pd.MultiIndex.from_arrays([frame["patient_id"].astype(str), day.dt.date])
    codes, uniques = pd.factorize(keys, sort=True)
    n_days, n_mod = len(uniques), len(registry)
    rep = np.repeat(np.arange(len(frame)), span)
    hour = first[rep] + (np.arange(rep.size) - np.repeat(np.cumsum(span) - span, span))
    flat = (codes[rep] * n_mod + mod[rep]) * N_HOURS + hour
    sums = np.zeros(n_days * n_mod * N_HOURS)
    counts = np.zeros_like(sums)
    np.add.at(sums, flat, share[rep])
    np.add.at(counts, flat, 1.0)
    sums = sums.reshape(n_days, n_mod, N_HOURS)
    counts = counts.reshape(n_days, n_mod, N_HOURS)
    out: dict[str, list[DailyTemplate]] = defaultdict(list)
    for i, (pid, date) in enumerate(uniques):
        out[pid].append(_finish_template(pid, date, sums[i], counts[i], registry))
    return dict(out)


# ---------------------------------------------------------------------------
# per-patient normalization
# ---------------------------------------------------------------------------

def normalize_values(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Min-max scale each modality over all of one patient's unmasked entries.

    ``values``/``mask`` are ``(n_days, n_modalities, 24)``.  A constant modality
    maps to 0; masked entries stay 0.
    """
    lo = np.where(mask, np.inf, values).min(axis=(0, 2), keepdims=True, initial=np.inf)
    hi = np.where(mask, -np.inf, values).max(axis=(0, 2), keepdims=True, initial=-np.inf)
    span = hi - lo
    ok = np.isfinite(span) & (span > 0)
    scaled = np.where(ok, (values - np.where(ok, lo, 0.0)) / np.where(ok, span, 1.0), 0.0)
    scaled = np.clip(scaled, 0.0, 1.0)
    scaled[mask] = 0.0
    return scaled


def normalize_per_patient(cohort: Cohort) -> Cohort:
    if len(cohort) == 0:
        raise ValueError("cannot normalize an empty cohort")
    patients = []
    for p in cohort:
        if not p.templates:
            patients.append(p)
            continue
        values, mask = p.stack()
        scaled = normalize_values(values, mask)
        templates = tuple(DailyTemplate(t.patient_id, t.date, v, t.missing_mask)
                          for t, v in zip(p.templates, scaled))
        patients.append(PatientRecord(p.patient_id, p.age, p.education_years, templates,
                                      p.ema, p.relapse_events, p.mobility))
    return Cohort(tuple(patients))
