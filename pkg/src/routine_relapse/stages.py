"""Pipeline stages.  Each reads upstream artifacts from the output directory and
writes its own subdirectory, so expensive steps are computed once and reused.

Layout under the output directory::

    synth/      generated cohort archive
    ingest/     canonical cohort archive actually used downstream
    gmm/        PCA + mixture model and the selection grid
    pam/        DTW distance matrix, medoid model, selection grid
    score/      per-day scores of both models
    analyze/    cluster summaries and near-relapse effects
    evaluate/   one subdirectory per (feature set, personalization) run
    report/     aggregated tables, SVG figures and a hashed manifest
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
import os
import shutil
from pathlib import Path

import numpy as np
import pandas as pd

from . import analytics
from .config import PipelineConfig
from .dtw import pairwise_dtw_matrix
from .gmm import GmmModel, GmmSelectionReport, gmm_scores, select_gmm
from .io import export_cohort, read_archive, sha256_file
from .pam import PamModel, pam_scores, select_pam
from .pca import PcaModel, fit_pca
from .predictor.evaluation import Grids, lopo_evaluate, random_baseline
from .predictor.features import build_sample_table
from .predictor.windows import make_window_samples
from .registry import ModalityRegistry, default_registry
from .synth import SynthSpec, generate_cohort, load_archetypes
from .templates import Cohort, flatten, normalize_per_patient

log = logging.getLogger(__name__)

STAGES = ("synth", "ingest", "fit-gmm", "fit-pam", "score", "analyze", "evaluate", "report")
STAGE_DIRS = {"synth": "synth", "ingest": "ingest", "fit-gmm": "gmm", "fit-pam": "pam", "score": "score",
              "analyze": "analyze", "evaluate": "evaluate", "report": "report"}
STAGE_FILE = "stage.json"
GMM_COLUMNS = ("assigned_likelihood", "weighted_likelihood")
PAM_COLUMNS = ("assigned_distance", "weighted_distance", "dtw_prev_day")


class StageError(RuntimeError):
    """A stage failed; ``record`` is the machine-readable form written to error.json."""

    def __init__(self, stage: str, message: str, **extra):
        super().__init__(message)
        self.stage = stage
        self.record = {"stage": stage, "error": type(self).__name__, "message": message, **extra}


class StageDependencyError(StageError):
    def __init__(self, stage: str, missing: str, detail: str = ""):
        msg = f"stage {stage!r} needs the output of stage {missing!r}; run `routine-relapse {missing}` first"
        super().__init__(stage, msg + (f" ({detail})" if detail else ""), missing_stage=missing)
        self.missing = missing


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python ones."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (dt.date,)):
        return obj.isoformat()
    return obj


def write_json(path: Path, payload) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(_clean(payload), indent=2, sort_keys=True, allow_nan=False) + "\n")
    os.replace(tmp, path)


def read_json(path: Path):
    return json.loads(Path(path).read_text())


def write_csv(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, lineterminator="\n", na_rep="")


def read_csv(path: Path, dates=("date",)) -> pd.DataFrame:
    frame = pd.read_csv(path, float_precision="round_trip", dtype={"patient_id": str})
    for col in dates:
        if col in frame:
            frame[col] = [dt.date.fromisoformat(str(v)) for v in frame[col]]
    return frame


def stage_dir(out, stage: str) -> Path:
    return Path(out) / STAGE_DIRS[stage]


def _begin(out, stage: str) -> Path:
    d = stage_dir(out, stage)
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    return d


def _finish(d: Path, stage: str, cfg: PipelineConfig, sections, inputs: dict) -> None:
    record = {"stage": stage, "config": cfg.stage_dict(*sections),
              "inputs": {name: sha256_file(p) for name, p in sorted(inputs.items())}}
    write_json(d / STAGE_FILE, record)


def require(out, stage: str, needed: str) -> Path:
    d = stage_dir(out, needed)
    if not (d / STAGE_FILE).exists():
        raise StageDependencyError(stage, needed, f"no {d / STAGE_FILE}")
    return d


def _registry(cfg: PipelineConfig) -> ModalityRegistry:
    return ModalityRegistry.load(cfg.paths.registry) if cfg.paths.registry else default_registry()


def load_cohort(out, stage: str, cfg: PipelineConfig) -> Cohort:
    d = require(out, stage, "ingest")
    return read_archive(d / "cohort", _registry(cfg)).cohort


def _score_frame(path: Path) -> pd.DataFrame:
    return read_csv(path)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_synth(cfg: PipelineConfig, out, threads: int = 1) -> Path:
    registry = _registry(cfg)
    s = cfg.synth
    spec = SynthSpec(n_patients=s.n_patients, days_per_patient=s.days_per_patient, n_relapses=s.n_relapses,
                     n_relapse_patients=s.n_relapse_patients, ramp_start=s.ramp_start, ramp_end=s.ramp_end,
                     missing_rate=s.missing_rate, noise_scale=s.noise_scale, inactive_weight=s.inactive_weight,
                     preference_concentration=s.preference_concentration, ema_drift=s.ema_drift,
                     ema_noise=s.ema_noise, ema_base=tuple(s.ema_base), seed=cfg.seed, start_date=s.start_date)
    arch = load_archetypes(cfg.paths.archetypes, registry) if cfg.paths.archetypes else None
    result = generate_cohort(spec, arch, registry, threads)
    d = _begin(out, "synth")
    export_cohort(result.cohort, d / "cohort", result.ground_truth, result.gps, registry)
    write_json(d / "synth.json", {"spec": spec.to_dict(), "archetypes": list(result.archetypes.names)})
    _finish(d, "synth", cfg, ("synth", "paths"), {})
    return d


def run_ingest(cfg: PipelineConfig, out, threads: int = 1) -> Path:
    registry = _registry(cfg)
    if cfg.paths.input:
        source = Path(cfg.paths.input)
    else:
        source = require(out, "ingest", "synth") / "cohort"
    archive = read_archive(source, registry)
    cohort = archive.cohort
    if len(cohort) == 0:
        raise StageError("ingest", f"{source}: no patients")
    d = _begin(out, "ingest")
    export_cohort(cohort, d / "cohort", archive.ground_truth, None, registry)
    write_json(d / "ingest.json", {
        "n_patients": len(cohort), "n_days": cohort.n_days,
        "n_relapse_events": sum(len(p.relapse_events) for p in cohort),
        "patients": [{"patient_id": p.patient_id, "n_days": len(p.templates),
                      "n_relapse_events": len(p.relapse_events)} for p in cohort]})
    _finish(d, "ingest", cfg, ("paths",), {"hourly.csv": d / "cohort" / "hourly.csv"})
    return d


def _embedded(cohort: Cohort):
    norm = normalize_per_patient(cohort)
    values, masks = norm.stack()
    return norm, values, masks, flatten(values)


def run_fit_gmm(cfg: PipelineConfig, out, threads: int = 1) -> Path:
    cohort = load_cohort(out, "fit-gmm", cfg)
    _, _, _, X = _embedded(cohort)
    pca = fit_pca(X, q=cfg.pca.q)
    Z = pca.transform(X)
    g = cfg.gmm
    model, report = select_gmm(Z, range(g.k_min, g.k_max + 1), tuple(g.cov_types), g.restarts, cfg.seed,
                               g.tol, g.max_iter, g.band, threads)
    d = _begin(out, "fit-gmm")
    write_json(d / "pca.json", pca.to_dict())
    write_json(d / "model.json", model.to_dict())
    write_json(d / "selection.json", report.to_dict())
    write_csv(pd.DataFrame([{k: v for k, v in c.to_dict().items() if k != "restart_log_likelihoods"}
                            for c in report.candidates]), d / "selection.csv")
    _finish(d, "fit-gmm", cfg, ("pca", "gmm"), {"hourly.csv": stage_dir(out, "ingest") / "cohort" / "hourly.csv"})
    return d


def run_fit_pam(cfg: PipelineConfig, out, threads: int = 1) -> Path:
    cohort = load_cohort(out, "fit-pam", cfg)
    _, values, _, _ = _embedded(cohort)
    D = pairwise_dtw_matrix(values, threads=threads)
    p = cfg.pam
    model, report = select_pam(list(values), range(p.k_min, p.k_max + 1), p.inits, cfg.seed, D,
                               p.max_sweeps, threads)
    d = _begin(out, "fit-pam")
    np.save(d / "distances.npy", D)
    write_json(d / "model.json", model.to_dict())
    write_json(d / "selection.json", report.to_dict())
    write_csv(pd.DataFrame({"k": report.k_values, "mean_cost": report.mean_costs, "best_cost": report.best_costs,
                            "elbow": [k == report.elbow_k for k in report.k_values]}), d / "selection.csv")
    _finish(d, "fit-pam", cfg, ("pam",), {"hourly.csv": stage_dir(out, "ingest") / "cohort" / "hourly.csv"})
    return d


def load_gmm(out, stage: str) -> tuple[PcaModel, GmmModel, GmmSelectionReport]:
    d = require(out, stage, "fit-gmm")
    return (PcaModel.from_dict(read_json(d / "pca.json")), GmmModel.from_dict(read_json(d / "model.json")),
            GmmSelectionReport.from_dict(read_json(d / "selection.json")))


def load_pam(out, stage: str) -> PamModel:
    d = require(out, stage, "fit-pam")
    return PamModel.from_dict(read_json(d / "model.json"))


def run_score(cfg: PipelineConfig, out, threads: int = 1) -> Path:
    cohort = load_cohort(out, "score", cfg)
    pca, gmm, _ = load_gmm(out, "score")
    pam = load_pam(out, "score")
    norm, _, _, X = _embedded(cohort)
    index = norm.day_index()
    index["date"] = [x.isoformat() for x in index["date"]]
    s = gmm_scores(gmm, pca.transform(X))
    gframe = index.copy()
    gframe["label"] = s["label"]
    for c in GMM_COLUMNS:
        gframe[c] = s[c]
    parts = [pd.DataFrame(pam_scores(pam, p.templates, p.dates)) for p in norm if p.templates]
    pscores = pd.concat(parts, ignore_index=True)
    pframe = index.copy()
    pframe["label"] = pscores["label"].to_numpy()
    for c in PAM_COLUMNS:
        pframe[c] = pscores[c].to_numpy()
    d = _begin(out, "score")
    write_csv(gframe, d / "gmm_scores.csv")
    write_csv(pframe, d / "pam_scores.csv")
    _finish(d, "score", cfg, (), {"gmm_model.json": stage_dir(out, "fit-gmm") / "model.json",
                                  "pam_model.json": stage_dir(out, "fit-pam") / "model.json"})
    return d


def load_scores(out, stage: str) -> tuple[pd.DataFrame, pd.DataFrame]:
    d = require(out, stage, "score")
    return _score_frame(d / "gmm_scores.csv"), _score_frame(d / "pam_scores.csv")


def day_scores(gmm: pd.DataFrame, pam: pd.DataFrame) -> pd.DataFrame:
    """Both models' scores in one frame with ``gmm_``/``pam_`` prefixes."""
    frame = gmm[["patient_id", "date"]].copy()
    for c in ("label",) + GMM_COLUMNS:
        frame[f"gmm_{c}"] = gmm[c].to_numpy()
    for c in ("label",) + PAM_COLUMNS:
        frame[f"pam_{c}"] = pam[c].to_numpy()
    return frame


SCORE_COLUMNS = tuple(f"gmm_{c}" for c in GMM_COLUMNS) + tuple(f"pam_{c}" for c in PAM_COLUMNS)


def _profile_rows(model: str, profiles: dict, registry: ModalityRegistry) -> list:
    rows = []
    for label, grid in profiles.items():
        for m, name in enumerate(registry.names):
            for h in range(grid.shape[1]):
                rows.append((model, label, name, h, float(grid[m, h])))
    return rows


def run_analyze(cfg: PipelineConfig, out, threads: int = 1) -> Path:
    registry = _registry(cfg)
    cohort = load_cohort(out, "analyze", cfg)
    pca, _, _ = load_gmm(out, "analyze")
    gmm, pam = load_scores(out, "analyze")
    norm, values, masks, X = _embedded(cohort)
    scores = day_scores(gmm, pam)
    relapses = {p.patient_id: p.relapse_events for p in norm}
    gmm_points = pca.transform(X) if cfg.analytics.spread_space == "model" else X
    summaries = {
        "gmm": analytics.summarize_clusters(gmm["label"], gmm_points, values, masks,
                                            gmm["assigned_likelihood"], gmm["weighted_likelihood"]),
        "pam": analytics.summarize_clusters(pam["label"], X, values, masks,
                                            pam["assigned_distance"], pam["weighted_distance"]),
    }
    xs = tuple(cfg.analytics.nr_windows)
    effects = analytics.effect_report(scores, relapses, SCORE_COLUMNS, xs, cfg.analytics.threshold)
    box = analytics.nr_boxplot_data(scores, relapses, SCORE_COLUMNS, xs)
    d = _begin(out, "analyze")
    for name, summary in summaries.items():
        table = summary.table.copy()
        table.insert(0, "model", name)
        write_csv(table, d / f"clusters_{name}.csv")
    profiles = [r for name, s in summaries.items() for r in _profile_rows(name, s.profiles, registry)]
    write_csv(pd.DataFrame(profiles, columns=["model", "label", "modality", "hour", "value"]),
              d / "cluster_profiles.csv")
    events = effects.events.copy()
    write_csv(events, d / "effects_events.csv")
    write_csv(effects.summary, d / "effects_summary.csv")
    write_csv(box, d / "nr_boxplot.csv")
    _finish(d, "analyze", cfg, ("analytics",), {"gmm_scores.csv": stage_dir(out, "score") / "gmm_scores.csv",
                                                 "pam_scores.csv": stage_dir(out, "score") / "pam_scores.csv"})
    return d


def evaluation_name(feature_set: str, personalization: bool) -> str:
    return feature_set.replace("+", "_") + ("" if personalization else "-nopers")


def sample_table(cfg: PipelineConfig, out, stage: str = "evaluate"):
    """Window samples and features for the ingested cohort (needs the score stage)."""
    cohort = load_cohort(out, stage, cfg)
    gmm, pam = load_scores(out, stage)
    norm = normalize_per_patient(cohort)
    samples = make_window_samples(norm, cfg.predictor.stride)
    if not samples:
        raise StageError(stage, "no patient has enough days for a prediction window")
    return build_sample_table(norm, samples, gmm, pam, _registry(cfg))


def run_evaluate(cfg: PipelineConfig, out, threads: int = 1, feature_set: str | None = None,
                 personalization: bool | None = None) -> Path:
    p = cfg.predictor
    feature_set = feature_set or p.feature_set
    personalization = p.personalization if personalization is None else personalization
    table = sample_table(cfg, out)
    if not np.any(table.y == 1):
        raise StageError("evaluate", "no positive windows: the cohort has no usable relapse events")
    grids = Grids(tuple(p.n_bins), tuple(p.subset_size), tuple(p.n_features), p.inner_folds)
    report = lopo_evaluate(table, feature_set, personalization, grids, cfg.seed, threads, p.n_trees)
    base_mean, base_std = random_baseline(table.y, seed=cfg.seed)
    root = stage_dir(out, "evaluate")
    root.mkdir(parents=True, exist_ok=True)
    d = root / evaluation_name(feature_set, personalization)
    if d.exists():
        shutil.rmtree(d)
    d.mkdir()
    payload = report.to_dict()
    payload["random_baseline"] = {"mean": base_mean, "std": base_std}
    payload["n_samples"] = int(len(table.y))
    payload["n_positive"] = int(table.y.sum())
    write_json(d / "report.json", payload)
    write_csv(report.per_patient, d / "per_patient.csv")
    preds = report.predictions.copy()
    preds["window_end"] = [x.isoformat() for x in preds["window_end"]]
    write_csv(preds, d / "predictions.csv")
    write_csv(pd.DataFrame(list(report.selection_frequency.items()), columns=["feature", "frequency"]),
              d / "selection_frequency.csv")
    _finish(d, "evaluate", cfg, ("predictor",), {"gmm_scores.csv": stage_dir(out, "score") / "gmm_scores.csv",
                                                  "pam_scores.csv": stage_dir(out, "score") / "pam_scores.csv"})
    write_json(root / STAGE_FILE, {"stage": "evaluate",
                                   "runs": sorted(x.name for x in root.iterdir() if (x / STAGE_FILE).exists())})
    return d


REPORT_MANIFEST = "manifest.json"


def _score_timeseries(scores: pd.DataFrame, cohort: Cohort) -> pd.DataFrame:
    starts = {p.patient_id: p.templates[0].date for p in cohort if p.templates}
    events = {(p.patient_id, r) for p in cohort for r in p.relapse_events}
    frame = scores.copy()
    frame.insert(2, "day", [(d - starts[pid]).days + 1 for pid, d in zip(frame["patient_id"], frame["date"])])
    frame.insert(3, "relapse", [(pid, d) in events for pid, d in zip(frame["patient_id"], frame["date"])])
    frame["date"] = [d.isoformat() for d in frame["date"]]
    return frame


def run_report(cfg: PipelineConfig, out, threads: int = 1, formats=("csv", "svg")) -> Path:
    from .plotting import FORMATS, PlotFormatError, emit_plot_data

    for fmt in formats:
        if fmt not in FORMATS:
            raise PlotFormatError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    cohort = load_cohort(out, "report", cfg)
    a = require(out, "report", "analyze")
    e = require(out, "report", "evaluate")
    gmm, pam = load_scores(out, "report")
    runs = sorted(x for x in e.iterdir() if (x / STAGE_FILE).exists())
    if not runs:
        raise StageDependencyError("report", "evaluate", "no evaluation runs found")
    d = _begin(out, "report")

    clusters = pd.concat([read_csv(a / "clusters_gmm.csv"), read_csv(a / "clusters_pam.csv")], ignore_index=True)
    write_csv(clusters, d / "cluster_summary.csv")
    write_csv(clusters[["model", "label", "size", "covariance_trace"]], d / "covariance_traces.csv")
    shutil.copyfile(a / "cluster_profiles.csv", d / "cluster_profiles.csv")
    write_csv(_score_timeseries(day_scores(gmm, pam), cohort), d / "score_timeseries.csv")
    shutil.copyfile(a / "nr_boxplot.csv", d / "nr_boxplot.csv")
    shutil.copyfile(a / "effects_summary.csv", d / "nr_deltas.csv")
    shutil.copyfile(a / "effects_events.csv", d / "nr_delta_events.csv")

    evals, freqs = [], []
    for run in runs:
        rep = read_json(run / "report.json")
        c = rep["confusion"]
        evals.append({"run": run.name, "feature_set": rep["feature_set"], "personalization": rep["personalization"],
                      "tp": c["tp"], "fp": c["fp"], "fn": c["fn"], "tn": c["tn"], "precision": rep["precision"],
                      "recall": rep["recall"], "f2": rep["f2"], "baseline_mean": rep["random_baseline"]["mean"],
                      "baseline_std": rep["random_baseline"]["std"], "n_samples": rep["n_samples"],
                      "n_positive": rep["n_positive"]})
        for feature, freq in rep["selection_frequency"].items():
            freqs.append({"run": run.name, "feature": feature, "frequency": freq})
    write_csv(pd.DataFrame(evals), d / "evaluation.csv")
    write_csv(pd.DataFrame(freqs, columns=["run", "feature", "frequency"]), d / "selection_frequency.csv")

    for fmt in formats:
        emit_plot_data(d, fmt)
    files = sorted(p for p in d.iterdir() if p.is_file() and p.name != REPORT_MANIFEST)
    write_json(d / REPORT_MANIFEST, {
        "seed": cfg.seed,
        "files": {p.name: {"sha256": sha256_file(p), "bytes": p.stat().st_size} for p in files}})
    return d


RUNNERS = {"synth": run_synth, "ingest": run_ingest, "fit-gmm": run_fit_gmm, "fit-pam": run_fit_pam,
           "score": run_score, "analyze": run_analyze, "evaluate": run_evaluate, "report": run_report}
# direct prerequisites, checked nearest first so errors name the closest missing stage
DEPENDS = {"synth": (), "ingest": (), "fit-gmm": ("ingest",), "fit-pam": ("ingest",),
           "score": ("fit-gmm", "fit-pam"), "analyze": ("score",), "evaluate": ("score",),
           "report": ("evaluate", "analyze")}


def run_stage(stage: str, cfg: PipelineConfig, out, threads: int = 1, **kwargs) -> Path:
    if stage not in RUNNERS:
        raise StageError(stage, f"unknown stage {stage!r}; expected one of {STAGES}")
    for needed in DEPENDS[stage]:
        require(out, stage, needed)
    return RUNNERS[stage](cfg, out, threads, **kwargs)
