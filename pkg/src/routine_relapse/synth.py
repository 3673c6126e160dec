"""Synthetic cohorts built from archetype routines with planted pre-relapse drift.

Each patient has a personal preference over archetype days.  In the 28 days
before each relapse the inactive archetype's share ramps up linearly, and EMA
items drift with the same ramp.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np
import pandas as pd

from .mobility import compute_mobility_modalities
from .parallel import parallel_map
from .registry import N_HOURS, ModalityRegistry, default_registry
from .templates import N_EMA_ITEMS, Cohort, DailyTemplate, PatientRecord

ARCHETYPE_SCHEMA = 1
MIN_LEAD_DAYS = 29
MIN_GAP_DAYS = 29
RAMP_DAYS = 28
INACTIVE = "inactive"


class SynthError(ValueError):
    pass


# ---------------------------------------------------------------------------
# archetypes
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Archetypes:
    names: tuple
    means: np.ndarray  # (A, M, 24)
    noise: np.ndarray  # (A,) multiplier on the cohort noise scale
    missing: np.ndarray  # (A,) hour-missingness, NaN = cohort default
    away: np.ndarray  # (A,) probability of being away from home while awake
    awake: np.ndarray  # (A, 24) bool

    def index(self, name: str) -> int:
        return self.names.index(name)


def _awake_hours(wake: int, sleep: int) -> np.ndarray:
    h = np.arange(N_HOURS)
    sleep = sleep % N_HOURS
    if wake < sleep:
        return (h >= wake) & (h < sleep)
    return (h >= wake) | (h < sleep)


def load_archetypes(path=None, registry: ModalityRegistry | None = None) -> Archetypes:
    registry = registry or default_registry()
    if path is None:
        text = resources.files("routine_relapse.data").joinpath("archetypes.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    spec = json.loads(text)
    if spec.get("schema_version") != ARCHETYPE_SCHEMA:
        raise SynthError(f"archetype file schema {spec.get('schema_version')!r}; expected {ARCHETYPE_SCHEMA}")
    groups = spec["groups"]
    covered = [m for g in groups.values() for m in g]
    if sorted(covered) != sorted(registry.names):
        raise SynthError("archetype groups must cover every registered modality exactly once")
    names, means, noise, missing, away, awake = [], [], [], [], [], []
    hours = np.arange(N_HOURS)
    for a in spec["archetypes"]:
        up = _awake_hours(int(a["wake"]), int(a["sleep"]))
        grid = np.zeros((len(registry), N_HOURS))
        for g, members in groups.items():
            day, night = a.get("levels", {}).get(g, spec["defaults"][g])
            for m in members:
                grid[registry.index(m)] = np.where(up, day, night)
        for m, (centre, amp, width) in a.get("peaks", {}).items():
            d = np.minimum(np.abs(hours - centre), N_HOURS - np.abs(hours - centre))
            grid[registry.index(m)] += amp * np.exp(-0.5 * (d / width) ** 2)
        names.append(a["name"])
        means.append(np.clip(grid, 0.0, 1.0))
        noise.append(float(a.get("noise", 1.0)))
        missing.append(float(a.get("missing", np.nan)))
        away.append(float(a.get("away", 0.3)))
        awake.append(up)
    if INACTIVE not in names:
        raise SynthError("archetype file needs an 'inactive' archetype")
    return Archetypes(tuple(names), np.array(means), np.array(noise), np.array(missing),
                      np.array(away), np.array(awake))


# ---------------------------------------------------------------------------
# generator parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    n_patients: int = 63
    days_per_patient: int = 120
    n_archetypes: int = 9
    n_relapses: int = 27
    n_relapse_patients: int = 20
    ramp_start: float = 0.0
    ramp_end: float = 0.8
    missing_rate: float = 0.05
    noise_scale: float = 0.05
    inactive_weight: float = 1.6  # base preference relative to the other archetypes
    preference_concentration: float = 4.0
    ema_rate: float = 0.6
    ema_drift: float = 2.0  # item shift at full ramp intensity
    ema_noise: float = 0.5
    ema_base: tuple = (0.9, 1.4)  # per-patient item baselines are uniform on this range
    gps_rate: float = 0.9
    seed: int = 0
    start_date: str = "2015-01-05"

    def __post_init__(self):
        for name in ("ramp_start", "ramp_end", "missing_rate", "ema_rate", "gps_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SynthError(f"{name}={v} must lie in [0, 1]")
        if self.n_patients < 1 or self.days_per_patient < 1:
            raise SynthError("need at least one patient and one day")
        if self.noise_scale < 0 or self.ema_noise < 0 or self.inactive_weight <= 0 or self.preference_concentration <= 0:
            raise SynthError("noise_scale, inactive_weight and preference_concentration must be positive")
        if len(self.ema_base) != 2 or self.ema_base[0] > self.ema_base[1]:
            raise SynthError("ema_base must be a (low, high) pair")
        if self.n_relapse_patients > self.n_patients:
            raise SynthError("more relapse patients than patients")
        if self.n_relapses and not self.n_relapse_patients:
            raise SynthError("relapses need at least one relapse patient")
        if self.n_relapses < self.n_relapse_patients:
            raise SynthError("every relapse patient needs at least one relapse")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthResult:
    cohort: Cohort
    ground_truth: pd.DataFrame  # patient_id, date, archetype_id (1-based)
    gps: pd.DataFrame  # patient_id, timestamp, lat, lon
    archetypes: Archetypes


def place_relapses(n_events: int, n_days: int, rng, patient_id: str = "") -> list[int]:
    """Day numbers (1-based) with the first >= 29 and consecutive gaps >= 29."""
    if n_events == 0:
        return []
    need = MIN_LEAD_DAYS + MIN_GAP_DAYS * (n_events - 1)
    slack = n_days - need
    if slack < 0:
        raise SynthError(f"{patient_id}: {n_events} relapse(s) cannot fit in {n_days} days")
    cuts = np.sort(rng.integers(0, slack + 1, size=n_events))
    parts = np.diff(np.concatenate([[0], cuts]))
    days, day = [], 0
    for i, extra in enumerate(parts):
        day += (MIN_LEAD_DAYS if i == 0 else MIN_GAP_DAYS) + int(extra)
        days.append(day)
    return days


def ramp_profile(n_days: int, relapse_days, start: float, end: float) -> np.ndarray:
    """Inactive-day mixing weight per day: linear start->end over [r-27, r]."""
    rho = np.zeros(n_days)
    day = np.arange(1, n_days + 1)
    for r in relapse_days:
        sel = (day >= r - RAMP_DAYS + 1) & (day <= r)
        frac = (day[sel] - (r - RAMP_DAYS + 1)) / (RAMP_DAYS - 1)
        rho[sel] = np.maximum(rho[sel], start + (end - start) * frac)
    return rho


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _patient(args):
    spec, arch, registry, index, pid, n_relapse, seed = args
    rng = np.random.default_rng(seed)
    D = spec.days_per_patient
    A = len(arch.names)
    inactive = arch.index(INACTIVE)
    base = np.ones(A)
    base[inactive] = spec.inactive_weight
    base /= base.sum()
    pref = rng.dirichlet(spec.preference_concentration * A * base)
    relapse_days = place_relapses(n_relapse, D, rng, pid)
    rho = ramp_profile(D, relapse_days, spec.ramp_start, spec.ramp_end)
    start = dt.date.fromisoformat(spec.start_date) + dt.timedelta(days=int(rng.integers(0, 365)))
    dates = [start + dt.timedelta(days=i) for i in range(D)]

    probs = (1 - rho)[:, None] * pref[None, :]
    probs[:, inactive] += rho
    u = rng.random(D)
    labels = np.minimum((u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1), A - 1)

    M = len(registry)
    sigma = spec.noise_scale * arch.noise[labels]
    values = arch.means[labels] + rng.normal(size=(D, M, N_HOURS)) * sigma[:, None, None]
    values = np.clip(values, 0.0, 1.0)
    miss_rate = np.where(np.isnan(arch.missing[labels]), spec.missing_rate, arch.missing[labels])
    mask = rng.random((D, M, N_HOURS)) < miss_rate[:, None, None]
    empty = mask.reshape(D, -1).all(axis=1)
    mask[empty, 0, 0] = False
    values[mask] = 0.0
    templates = tuple(DailyTemplate(pid, d, values[i], mask[i]) for i, d in enumerate(dates))

    # EMA: items 1-5 rise and items 6-10 fall as relapse approaches
    item_base = rng.uniform(spec.ema_base[0], spec.ema_base[1], N_EMA_ITEMS)
    drift = np.where(np.arange(N_EMA_ITEMS) < N_EMA_ITEMS // 2, 1.0, -1.0) * spec.ema_drift
    answered = rng.random(D) < spec.ema_rate
    raw = item_base[None, :] + drift[None, :] * rho[:, None] + rng.normal(0, spec.ema_noise, (D, N_EMA_ITEMS))
    items = np.clip(np.round(raw), 0, 3)
    ema = {dates[i]: items[i] for i in np.flatnonzero(answered)}

    # GPS: home while asleep, otherwise home or at one of three personal places
    home = np.array([40.75, -73.98]) + rng.normal(0, 0.05, 2)
    places = home[None, :] + rng.normal(0, 0.04, (3, 2))
    rows = []
    for i, d in enumerate(dates):
        a = labels[i]
        dest = places[rng.integers(3)]
        fix = rng.random(N_HOURS) < spec.gps_rate
        out = rng.random(N_HOURS) < arch.away[a]
        minutes = rng.integers(0, 60, N_HOURS)
        jitter = rng.normal(0, 0.0001, (N_HOURS, 2))
        for h in np.flatnonzero(fix):
            loc = dest if (arch.awake[a, h] and out[h]) else home
            ts = dt.datetime.combine(d, dt.time(int(h), int(minutes[h])))
            rows.append((ts.isoformat(), float(loc[0] + jitter[h, 0]), float(loc[1] + jitter[h, 1])))
    mobility_frame = compute_mobility_modalities(rows, dates)
    mobility = {day: mobility_frame.loc[day].to_numpy(dtype=np.float64) for day in dates}
    gps = pd.DataFrame(rows, columns=["timestamp", "lat", "lon"])
    gps.insert(0, "patient_id", pid)

    age = float(rng.integers(18, 66))
    edu = float(rng.integers(8, 21))
    record = PatientRecord(pid, age, edu, templates, ema,
                           tuple(start + dt.timedelta(days=r - 1) for r in relapse_days), mobility)
    truth = pd.DataFrame({"patient_id": pid, "date": dates, "archetype_id": labels + 1})
    return record, truth, gps


def generate_cohort(spec: SynthSpec = SynthSpec(), archetypes: Archetypes | None = None,
                    registry: ModalityRegistry | None = None, threads: int = 1) -> SynthResult:
    """Deterministic cohort for ``spec``; also returns per-day archetype labels and GPS fixes."""
    registry = registry or default_registry()
    arch = archetypes or load_archetypes(registry=registry)
    if len(arch.names) != spec.n_archetypes:
        raise SynthError(f"spec asks for {spec.n_archetypes} archetypes; file defines {len(arch.names)}")
    root = np.random.SeedSequence(spec.seed)
    rng = np.random.default_rng(root)
    relapsers = np.sort(rng.choice(spec.n_patients, size=spec.n_relapse_patients, replace=False))
    counts = np.zeros(spec.n_patients, dtype=np.int64)
    counts[relapsers] = 1
    order = relapsers[rng.permutation(len(relapsers))]
    for j in range(spec.n_relapses - spec.n_relapse_patients):
        counts[order[j % len(order)]] += 1
    width = len(str(spec.n_patients))
    seeds = root.spawn(spec.n_patients)
    jobs = [(spec, arch, registry, i, f"p{i + 1:0{width}d}", int(counts[i]), seeds[i])
            for i in range(spec.n_patients)]
    parts = parallel_map(_patient, jobs, threads)
    cohort = Cohort(tuple(p[0] for p in parts))
    truth = pd.concat([p[1] for p in parts], ignore_index=True)
    gps = pd.concat([p[2] for p in parts], ignore_index=True)
    return SynthResult(cohort, truth, gps, arch)
