"""Pipeline configuration: a versioned YAML file mapped onto nested dataclasses."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .analytics import NEGLIGIBLE, NR_WINDOWS
from .gmm import COV_TYPES
from .predictor.evaluation import INNER_FOLDS, N_FEATURES_GRID, SUBSET_GRID
from .predictor.features import FEATURE_SETS
from .predictor.quantize import BIN_GRID

CONFIG_SCHEMA = 1
K_RANGE = (5, 20)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class PathsConfig:
    input: str | None = None
    output: str | None = None
    registry: str | None = None
    archetypes: str | None = None


@dataclass
class SynthConfig:
    n_patients: int = 63
    days_per_patient: int = 120
    n_relapses: int = 27
    n_relapse_patients: int = 20
    ramp_start: float = 0.0
    ramp_end: float = 0.8
    missing_rate: float = 0.05
    noise_scale: float = 0.05
    inactive_weight: float = 1.6
    preference_concentration: float = 4.0
    ema_drift: float = 2.0
    ema_noise: float = 0.5
    ema_base: list = field(default_factory=lambda: [0.9, 1.4])
    start_date: str = "2015-01-05"


@dataclass
class PcaConfig:
    q: int | None = 12


@dataclass
class GmmConfig:
    k_min: int = 5
    k_max: int = 20
    cov_types: list = field(default_factory=lambda: list(COV_TYPES))
    restarts: int = 5
    tol: float = 1e-6
    max_iter: int = 200
    band: float = 0.02


@dataclass
class PamConfig:
    k_min: int = 5
    k_max: int = 20
    inits: int = 5
    max_sweeps: int = 100


@dataclass
class AnalyticsConfig:
    nr_windows: list = field(default_factory=lambda: list(NR_WINDOWS))
    threshold: float = NEGLIGIBLE
    spread_space: str = "model"  # "model": embedded for GMM, templates for PAM; "template": both on templates


@dataclass
class PredictorConfig:
    n_bins: list = field(default_factory=lambda: list(BIN_GRID))
    subset_size: list = field(default_factory=lambda: list(SUBSET_GRID))
    n_features: list = field(default_factory=lambda: list(N_FEATURES_GRID))
    inner_folds: int = INNER_FOLDS
    n_trees: int = 11
    stride: int = 7
    feature_set: str = "all"
    personalization: bool = True


@dataclass
class PipelineConfig:
    seed: int
    schema_version: int = CONFIG_SCHEMA
    allow_out_of_range: bool = False
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    pca: PcaConfig = field(default_factory=PcaConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    pam: PamConfig = field(default_factory=PamConfig)
    analytics: AnalyticsConfig = field(default_factory=AnalyticsConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def stage_dict(self, *sections: str) -> dict:
        """The config slice a stage depends on, for artifact provenance."""
        d = self.to_dict()
        return {"seed": self.seed, **{s: d[s] for s in sections}}


_SECTIONS = {"paths": PathsConfig, "synth": SynthConfig, "pca": PcaConfig, "gmm": GmmConfig,
             "pam": PamConfig, "analytics": AnalyticsConfig, "predictor": PredictorConfig}


def _build(cls, data, prefix):
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
    return cls(**data)


def from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a mapping")
    data = dict(data)
    version = data.get("schema_version", CONFIG_SCHEMA)
    if version != CONFIG_SCHEMA:
        raise ConfigError("schema_version", f"unsupported version {version!r}; expected {CONFIG_SCHEMA}")
    if data.get("seed") is None:
        raise ConfigError("seed", "a master seed is required")
    top = {f.name for f in dataclasses.fields(PipelineConfig)}
    for key in data:
        if key not in top:
            raise ConfigError(key, "unknown key")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value or {}, key)
        else:
            kwargs[key] = value
    cfg = PipelineConfig(**kwargs)
    validate(cfg)
    return cfg


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Read a YAML config; ``overrides`` are dotted keys applied before validation."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("<file>", f"YAML parse error: {exc}") from None
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    if "seed" not in data:
        data["seed"] = None
    return from_dict(data)


def _int_type(key, value):
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(key, f"expected an integer, got {value!r}")


def _subset(key, values, allowed, strict):
    if not values:
        raise ConfigError(key, "must be nonempty")
    bad = [v for v in values if v not in allowed]
    if bad and strict:
        raise ConfigError(key, f"values {bad} outside {list(allowed)} (set allow_out_of_range to override)")


def validate(cfg: PipelineConfig) -> None:
    strict = not cfg.allow_out_of_range
    _int_type("seed", cfg.seed)
    for section, lo_hi in (("gmm", K_RANGE), ("pam", K_RANGE)):
        sec = getattr(cfg, section)
        _int_type(f"{section}.k_min", sec.k_min)
        _int_type(f"{section}.k_max", sec.k_max)
        if sec.k_min > sec.k_max or sec.k_min < 1:
            raise ConfigError(f"{section}.k_min", "need 1 <= k_min <= k_max")
        if strict and (sec.k_min < lo_hi[0] or sec.k_max > lo_hi[1]):
            raise ConfigError(f"{section}.k_max", f"k range outside {lo_hi[0]}..{lo_hi[1]} "
                                                  "(set allow_out_of_range to override)")
    for c in cfg.gmm.cov_types:
        if c not in COV_TYPES:
            raise ConfigError("gmm.cov_types", f"unknown covariance type {c!r}")
    if cfg.gmm.restarts < 1:
        raise ConfigError("gmm.restarts", "must be >= 1")
    if cfg.pam.inits < 1:
        raise ConfigError("pam.inits", "must be >= 1")
    if cfg.pca.q is not None:
        _int_type("pca.q", cfg.pca.q)
        if cfg.pca.q < 1 or (strict and cfg.pca.q > 200):
            raise ConfigError("pca.q", "must lie in 1..200")
    _subset("analytics.nr_windows", cfg.analytics.nr_windows, NR_WINDOWS, strict)
    if cfg.analytics.spread_space not in ("model", "template"):
        raise ConfigError("analytics.spread_space", "expected 'model' or 'template'")
    p = cfg.predictor
    _subset("predictor.n_bins", p.n_bins, BIN_GRID, strict)
    if min(p.n_bins) < 2:
        raise ConfigError("predictor.n_bins", "bins must be >= 2")
    _subset("predictor.subset_size", p.subset_size, SUBSET_GRID, strict)
    _subset("predictor.n_features", p.n_features, N_FEATURES_GRID, strict)
    if p.feature_set not in FEATURE_SETS:
        raise ConfigError("predictor.feature_set", f"expected one of {list(FEATURE_SETS)}")
    if p.inner_folds < 2:
        raise ConfigError("predictor.inner_folds", "must be >= 2")
    if strict and p.n_trees != 11:
        raise ConfigError("predictor.n_trees", "the forest uses 11 trees (set allow_out_of_range to override)")
    if p.stride < 1:
        raise ConfigError("predictor.stride", "must be >= 1")


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
