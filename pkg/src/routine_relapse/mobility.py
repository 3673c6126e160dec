"""Daily mobility series derived from GPS fixes."""

from __future__ import annotations

import datetime as dt
import logging
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .templates import MOBILITY_SERIES, parse_timestamp

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
GRID_KM = 0.1
HOME_RADIUS_KM = 0.1
NIGHT_HOURS = (0, 6)


def haversine_km(lat1, lon1, lat2, lon2):
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(v, dtype=np.float64)) for v in (lat1, lon1, lat2, lon2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def snap_to_grid(lat, lon, ref_lat: float, cell_km: float = GRID_KM):
    """Integer cell ids on an equal-distance grid of ``cell_km`` around ``ref_lat``."""
    km_per_deg = np.pi * EARTH_RADIUS_KM / 180.0
    lat_step = cell_km / km_per_deg
    lon_step = lat_step / max(np.cos(np.radians(ref_lat)), 1e-6)
    return (np.round(np.asarray(lat) / lat_step).astype(np.int64),
            np.round(np.asarray(lon) / lon_step).astype(np.int64),
            lat_step, lon_step)


def estimate_home(times: Sequence[dt.datetime], lat, lon) -> tuple[float, float]:
    """Home location from night-time fixes (00:00-06:00): the 100 m cell that is the
    great-circle medoid of the snapped fixes, then the medoid fix inside it.

    Falls back to all fixes, with a warning, when the record has no night fixes.
    """
    lat = np.asarray(lat, dtype=np.float64)
    lon = np.asarray(lon, dtype=np.float64)
    if lat.size == 0:
        raise ValueError("no GPS fixes")
    hours = np.array([t.hour for t in times])
    night = (hours >= NIGHT_HOURS[0]) & (hours < NIGHT_HOURS[1])
    if not night.any():
        log.warning("no night-time GPS fixes; home taken as the medoid of all fixes")
        night = np.ones_like(night)
    ref = float(lat.mean())
    ci, cj, lat_step, lon_step = snap_to_grid(lat[night], lon[night], ref)
    cells, counts = np.unique(np.stack([ci, cj], axis=1), axis=0, return_counts=True)
    clat, clon = cells[:, 0] * lat_step, cells[:, 1] * lon_step
    dist = haversine_km(clat[:, None], clon[:, None], clat[None, :], clon[None, :])
    best = int(np.argmin(dist @ counts))
    # home is an observed fix: the medoid of the raw fixes inside the winning cell
    inside = (ci == cells[best, 0]) & (cj == cells[best, 1])
    pts, mult = np.unique(np.stack([lat[night][inside], lon[night][inside]], axis=1), axis=0, return_counts=True)
    d = haversine_km(pts[:, None, 0], pts[:, None, 1], pts[None, :, 0], pts[None, :, 1])
    j = int(np.argmin(d @ mult))
    return float(pts[j, 0]), float(pts[j, 1])


def compute_mobility_modalities(gps_rows: Iterable, dates: Iterable[dt.date] | None = None,
                                max_gap_hours: float = 2.0) -> pd.DataFrame:
    """Four daily mobility series from ``(timestamp, lat, lon)`` fixes.

    Columns: distance_from_home (mean km to home), total_movement (km between
    consecutive fixes), time_in_location (mean hours per visited 100 m cell),
    time_at_home (hours within 100 m of home).  A fix's dwell is the gap to the
    next fix on the same day; gaps longer than ``max_gap_hours`` are treated as
    unobserved.  Requested ``dates`` without fixes come back as NaN rows.
    """
    rows = sorted((parse_timestamp(t), float(a), float(b)) for t, a, b in gps_rows)
    index = sorted(set(dates)) if dates is not None else None
    if not rows:
        return pd.DataFrame(np.nan, index=pd.Index(index or [], name="date"), columns=list(MOBILITY_SERIES))
    times = [r[0] for r in rows]
    lat = np.array([r[1] for r in rows])
    lon = np.array([r[2] for r in rows])
    home_lat, home_lon = estimate_home(times, lat, lon)
    ci, cj, _, _ = snap_to_grid(lat, lon, float(lat.mean()))
    to_home = haversine_km(lat, lon, home_lat, home_lon)
    days = np.array([t.date() for t in times])
    out = {}
    for day in sorted(set(days)):
        sel = np.flatnonzero(days == day)
        step = haversine_km(lat[sel[:-1]], lon[sel[:-1]], lat[sel[1:]], lon[sel[1:]])
        gaps = np.array([(times[b] - times[a]).total_seconds() / 3600.0 for a, b in zip(sel[:-1], sel[1:])])
        dwell = np.where(gaps <= max_gap_hours, gaps, 0.0)
        at_home = float(dwell[to_home[sel[:-1]] <= HOME_RADIUS_KM].sum())
        per_cell: dict[tuple[int, int], float] = {}
        for idx, d in zip(sel[:-1], dwell):
            if d > 0:
                key = (int(ci[idx]), int(cj[idx]))
                per_cell[key] = per_cell.get(key, 0.0) + d
        in_location = float(np.mean(list(per_cell.values()))) if per_cell else 0.0
        out[day] = (float(to_home[sel].mean()), float(step.sum()), in_location, at_home)
    frame = pd.DataFrame.from_dict(out, orient="index", columns=list(MOBILITY_SERIES))
    frame.index.name = "date"
    if index is not None:
        frame = frame.reindex(index)
        frame.index.name = "date"
    return frame
