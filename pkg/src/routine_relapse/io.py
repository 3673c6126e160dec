"""Cohort archives: a directory of CSV tables plus a hashed manifest.

Values are written with round-trip float formatting so that
``import_cohort(export_cohort(c))`` reproduces ``c`` bit for bit.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .mobility import compute_mobility_modalities
from .registry import N_HOURS, ModalityRegistry, default_registry
from .templates import (MOBILITY_SERIES, N_EMA_ITEMS, Cohort, DailyTemplate, IngestError, PatientRecord,
                        templates_from_frame)

ARCHIVE_FORMAT = "routine-relapse-cohort"
ARCHIVE_SCHEMA = 1
MANIFEST = "cohort.json"
HOUR_COLUMNS = [f"h{h:02d}" for h in range(N_HOURS)]
EMA_COLUMNS = [f"item_{i + 1}" for i in range(N_EMA_ITEMS)]


class ArchiveError(ValueError):
    pass


@dataclass
class Archive:
    cohort: Cohort
    ground_truth: pd.DataFrame | None = None
    gps: pd.DataFrame | None = None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    # repr-style floats round-trip exactly; fixed line endings keep hashes stable
    frame.to_csv(path, index=False, lineterminator="\n", na_rep="")


def _read_csv(path: Path, **kw) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip", keep_default_na=False, na_values=[""], **kw)


def _dates(col) -> list[dt.date]:
    return [dt.date.fromisoformat(str(v)) for v in col]


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _hourly_frame(cohort: Cohort, registry: ModalityRegistry) -> pd.DataFrame:
    rows_pid, rows_date, rows_mod, blocks = [], [], [], []
    for p in cohort:
        for t in p.templates:
            grid = np.where(t.missing_mask, np.nan, t.values)
            keep = ~t.missing_mask.all(axis=1)
            for m in np.flatnonzero(keep):
                rows_pid.append(p.patient_id)
                rows_date.append(t.date.isoformat())
                rows_mod.append(registry.names[m])
                blocks.append(grid[m])
    frame = pd.DataFrame({"patient_id": rows_pid, "date": rows_date, "modality": rows_mod})
    hours = np.array(blocks).reshape(len(blocks), N_HOURS)
    return pd.concat([frame, pd.DataFrame(hours, columns=HOUR_COLUMNS)], axis=1)


def export_cohort(cohort: Cohort, path, ground_truth: pd.DataFrame | None = None,
                  gps: pd.DataFrame | None = None, registry: ModalityRegistry | None = None) -> Path:
    """Write ``cohort`` (and optional synth extras) as an archive directory."""
    registry = registry or default_registry()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tables = {
        "hourly.csv": _hourly_frame(cohort, registry),
        "demographics.csv": pd.DataFrame(
            [(p.patient_id, p.age, p.education_years) for p in cohort],
            columns=["patient_id", "age", "education_years"]),
        "ema.csv": pd.DataFrame(
            [(p.patient_id, d.isoformat(), *v.tolist()) for p in cohort for d, v in p.ema.items()],
            columns=["patient_id", "date", *EMA_COLUMNS]),
        "mobility.csv": pd.DataFrame(
            [(p.patient_id, d.isoformat(), *v.tolist()) for p in cohort for d, v in p.mobility.items()],
            columns=["patient_id", "date", *MOBILITY_SERIES]),
        "relapses.csv": pd.DataFrame(
            [(p.patient_id, r.isoformat()) for p in cohort for r in p.relapse_events],
            columns=["patient_id", "date"]),
    }
    if ground_truth is not None:
        gt = ground_truth[["patient_id", "date", "archetype_id"]].copy()
        gt["date"] = [d.isoformat() for d in gt["date"]]
        tables["ground_truth.csv"] = gt
    if gps is not None:
        tables["gps.csv"] = gps[["patient_id", "timestamp", "lat", "lon"]]
    files = {}
    for name, frame in tables.items():
        _write_csv(frame, path / name)
        files[name] = {"sha256": sha256_file(path / name), "rows": int(len(frame))}
    manifest = {"format": ARCHIVE_FORMAT, "schema_version": ARCHIVE_SCHEMA,
                "modalities": list(registry.names), "files": files}
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path / MANIFEST)
    return path


# ---------------------------------------------------------------------------
# import
# ---------------------------------------------------------------------------

def _check_manifest(path: Path, registry: ModalityRegistry) -> dict | None:
    mpath = path / MANIFEST
    if not mpath.exists():
        return None
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"{mpath}: unreadable manifest ({exc})") from None
    if manifest.get("format") != ARCHIVE_FORMAT:
        raise ArchiveError(f"{mpath}: not a cohort archive")
    if manifest.get("schema_version") != ARCHIVE_SCHEMA:
        raise ArchiveError(f"{mpath}: archive schema {manifest.get('schema_version')!r}, "
                           f"this version reads {ARCHIVE_SCHEMA}")
    if manifest.get("modalities") != list(registry.names):
        raise ArchiveError(f"{mpath}: modality list differs from the registry")
    for name, meta in manifest.get("files", {}).items():
        f = path / name
        if not f.exists():
            raise ArchiveError(f"{path}: missing {name}")
        if sha256_file(f) != meta["sha256"]:
            raise ArchiveError(f"{f}: content hash mismatch (file corrupted or edited)")
    return manifest


def _templates_from_hourly(frame: pd.DataFrame, registry: ModalityRegistry) -> dict[str, list[DailyTemplate]]:
    if frame.empty:
        return {}
    unknown = ~frame["modality"].isin(registry.names)
    if unknown.any():
        raise IngestError(f"unknown modality {frame.loc[unknown, 'modality'].iloc[0]!r} in hourly table")
    keys = pd.MultiIndex.from_arrays([frame["patient_id"].astype(str), frame["date"].astype(str)])
    codes, uniques = pd.factorize(keys, sort=True)
    grid = np.full((len(uniques), len(registry), N_HOURS), np.nan)
    mod = frame["modality"].map(registry.index).to_numpy(np.int64)
    grid[codes, mod] = frame[HOUR_COLUMNS].to_numpy(np.float64)
    mask = np.isnan(grid)
    values = np.where(mask, 0.0, grid)
    out: dict[str, list[DailyTemplate]] = {}
    for i, (pid, date) in enumerate(uniques):
        out.setdefault(pid, []).append(DailyTemplate(pid, dt.date.fromisoformat(date), values[i], mask[i]))
    return out


def read_archive(path, registry: ModalityRegistry | None = None) -> Archive:
    """Read an archive (or a raw dataset directory with the same tables).

    Either ``hourly.csv`` (hour grids) or ``observations.csv`` (raw intervals)
    supplies templates.  Mobility comes from ``mobility.csv`` when present and
    is otherwise derived from ``gps.csv``.  Hash mismatches abort before any
    cohort is built.
    """
    registry = registry or default_registry()
    path = Path(path)
    if not path.is_dir():
        raise ArchiveError(f"{path}: not a directory")
    _check_manifest(path, registry)
    try:
        if (path / "hourly.csv").exists():
            templates = _templates_from_hourly(_read_csv(path / "hourly.csv", dtype={"patient_id": str}), registry)
        elif (path / "observations.csv").exists():
            obs = _read_csv(path / "observations.csv", dtype={"patient_id": str})
            templates = templates_from_frame(obs, registry)
        else:
            raise ArchiveError(f"{path}: needs hourly.csv or observations.csv")
        demo = (_read_csv(path / "demographics.csv", dtype={"patient_id": str})
                if (path / "demographics.csv").exists() else pd.DataFrame(columns=["patient_id"]))
        ema_t = _read_csv(path / "ema.csv", dtype={"patient_id": str}) if (path / "ema.csv").exists() else None
        rel = _read_csv(path / "relapses.csv", dtype={"patient_id": str}) if (path / "relapses.csv").exists() else None
        gps = _read_csv(path / "gps.csv", dtype={"patient_id": str}) if (path / "gps.csv").exists() else None
        mob = _read_csv(path / "mobility.csv", dtype={"patient_id": str}) if (path / "mobility.csv").exists() else None
        truth = None
        if (path / "ground_truth.csv").exists():
            truth = _read_csv(path / "ground_truth.csv", dtype={"patient_id": str})
            truth["date"] = _dates(truth["date"])
    except (pd.errors.ParserError, KeyError, ValueError) as exc:
        if isinstance(exc, ArchiveError):
            raise
        raise ArchiveError(f"{path}: malformed table ({exc})") from None

    ids = sorted(set(templates) | set(demo["patient_id"]))
    demo_map = {r.patient_id: r for r in demo.itertuples(index=False)}
    ema: dict[str, dict] = {}
    if ema_t is not None:
        for pid, d, *items in ema_t[["patient_id", "date", *EMA_COLUMNS]].itertuples(index=False):
            ema.setdefault(pid, {})[dt.date.fromisoformat(d)] = np.array(items, dtype=np.float64)
    relapses: dict[str, list] = {}
    if rel is not None:
        for pid, d in rel[["patient_id", "date"]].itertuples(index=False):
            relapses.setdefault(pid, []).append(dt.date.fromisoformat(d))
    mobility: dict[str, dict] = {}
    if mob is not None:
        for pid, d, *vals in mob[["patient_id", "date", *MOBILITY_SERIES]].itertuples(index=False):
            mobility.setdefault(pid, {})[dt.date.fromisoformat(d)] = np.array(vals, dtype=np.float64)
    elif gps is not None:
        for pid, g in gps.groupby("patient_id", sort=True):
            days = [t.date for t in templates.get(pid, [])]
            frame = compute_mobility_modalities(g[["timestamp", "lat", "lon"]].itertuples(index=False), days)
            mobility[pid] = {d: frame.loc[d].to_numpy(dtype=np.float64) for d in frame.index}
    patients = []
    for pid in ids:
        d = demo_map.get(pid)
        age = None if d is None or pd.isna(d.age) else float(d.age)
        edu = None if d is None or pd.isna(d.education_years) else float(d.education_years)
        patients.append(PatientRecord(pid, age, edu, tuple(templates.get(pid, [])), ema.get(pid, {}),
                                      tuple(relapses.get(pid, [])), mobility.get(pid, {})))
    return Archive(Cohort(tuple(patients)), truth, gps)


def import_cohort(path, registry: ModalityRegistry | None = None) -> Cohort:
    return read_archive(path, registry).cohort
