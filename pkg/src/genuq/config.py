"""Experiment configuration: a versioned JSON document with strict schema
validation. Unknown keys anywhere in the document are errors, so typos
cannot silently change an experiment."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .diffusion import (
    OBJECTIVE_EPSILON,
    OBJECTIVE_FLOW,
    SAMPLER_DDIM,
    SAMPLER_DDPM,
    SAMPLER_FLOW,
)
from .errors import ConfigError

CONFIG_VERSION = 1


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "modes"          # "modes" or "csv"
    path: str | None = None      # csv only
    grid_side: int = 5
    span: float = 2.0
    mode_std: float = 0.05
    hallucination_radius: float = 3.0
    n_train: int = 4000
    n_holdout: int = 4000


@dataclass(frozen=True)
class TrainSection:
    objective: str = OBJECTIVE_EPSILON
    epochs: int = 60
    batch_size: int = 128
    lr: float = 1e-3
    ema_decay: float = 0.999
    hidden_dims: tuple[int, ...] = (128, 128, 128)
    activation: str = "silu"
    time_embed_dim: int = 32
    conditional: bool = False
    schedule_kind: str = "linear"
    schedule_steps: int = 1000


@dataclass(frozen=True)
class SamplingSection:
    kind: str = SAMPLER_DDPM
    steps: int | None = None     # defaults to schedule_steps for ddpm/ddim
    eta: float = 0.0
    count: int = 10000


@dataclass(frozen=True)
class PosteriorSection:
    kind: str = "ensemble"       # "ensemble" or "laplace"
    members: int = 5
    prior_precision: float = 1.0
    observation_noise: float = 1.0
    fit_fraction: float = 1.0


@dataclass(frozen=True)
class ScoringSection:
    mc_samples: int = 5
    steps: int = 50
    sampler: str = SAMPLER_DDIM
    eta: float = 0.0
    sem_noise: float = 0.001
    feature_kind: str = "identity"   # identity | random-projection | embedding-file
    feature_dim: int | None = None
    feature_seed: int = 0
    embedding_path: str | None = None
    include_base: bool = False


@dataclass(frozen=True)
class FilterSection:
    n_grid: tuple[int, ...] = ()
    scores: tuple[str, ...] = ("entropy",)
    baseline_count: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/out"
    threads: int = 1
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainSection = field(default_factory=TrainSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    posterior: PosteriorSection = field(default_factory=PosteriorSection)
    scoring: ScoringSection = field(default_factory=ScoringSection)
    filtering: FilterSection = field(default_factory=FilterSection)


_SCHEMA = {
    "version": None,
    "seed": None,
    "output_dir": None,
    "threads": None,
    "dataset": {
        "kind", "path", "grid_side", "span", "mode_std", "hallucination_radius",
        "n_train", "n_holdout",
    },
    "train": {
        "objective", "epochs", "batch_size", "lr", "ema_decay", "hidden_dims",
        "activation", "time_embed_dim", "conditional", "schedule_kind",
        "schedule_steps",
    },
    "sampling": {"kind", "steps", "eta", "count"},
    "posterior": {
        "kind", "members", "prior_precision", "observation_noise", "fit_fraction",
    },
    "scoring": {
        "mc_samples", "steps", "sampler", "eta", "sem_noise", "feature_kind",
        "feature_dim", "feature_seed", "embedding_path", "include_base",
    },
    "filtering": {"n_grid", "scores", "baseline_count"},
}


def _check_keys(doc: dict) -> None:
    for key in doc:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
    for key, allowed in _SCHEMA.items():
        if allowed is None or key not in doc:
            continue
        section = doc[key]
        if not isinstance(section, dict):
            raise ConfigError(f"config section {key!r} must be an object")
        for sub in section:
            if sub not in allowed:
                raise ConfigError(f"unknown config key {key}.{sub!r}")


def _merge(section_cls, payload: dict):
    try:
        if "hidden_dims" in payload:
            payload = {**payload, "hidden_dims": tuple(payload["hidden_dims"])}
        if "n_grid" in payload:
            payload = {**payload, "n_grid": tuple(payload["n_grid"])}
        if "scores" in payload:
            payload = {**payload, "scores": tuple(payload["scores"])}
        return section_cls(**payload)
    except TypeError as exc:
        raise ConfigError(f"bad {section_cls.__name__} payload: {exc}") from exc


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Cross-field checks; returns the config for chaining."""
    d, t, s, p, sc, f = (cfg.dataset, cfg.train, cfg.sampling, cfg.posterior,
                         cfg.scoring, cfg.filtering)
    if d.kind not in ("modes", "csv"):
        raise ConfigError(f"dataset.kind must be modes or csv, got {d.kind!r}")
    if d.kind == "csv" and not d.path:
        raise ConfigError("dataset.kind=csv requires dataset.path")
    if t.objective not in (OBJECTIVE_EPSILON, OBJECTIVE_FLOW):
        raise ConfigError(f"unknown train.objective {t.objective!r}")
    if s.kind not in (SAMPLER_DDPM, SAMPLER_DDIM, SAMPLER_FLOW):
        raise ConfigError(f"unknown sampling.kind {s.kind!r}")
    if t.objective == OBJECTIVE_FLOW and s.kind != SAMPLER_FLOW:
        raise ConfigError("flow-velocity training requires the flow-euler sampler")
    if t.objective == OBJECTIVE_EPSILON and s.kind == SAMPLER_FLOW:
        raise ConfigError("flow-euler sampling requires flow-velocity training")
    if s.count < 1:
        raise ConfigError("sampling.count must be >= 1")
    base_steps = s.steps if s.steps is not None else t.schedule_steps
    if s.kind in (SAMPLER_DDPM, SAMPLER_DDIM) and base_steps > t.schedule_steps:
        raise ConfigError("sampling.steps cannot exceed train.schedule_steps")
    if p.kind not in ("ensemble", "laplace"):
        raise ConfigError(f"unknown posterior.kind {p.kind!r}")
    if p.kind == "ensemble" and p.members < 2:
        raise ConfigError("posterior.members must be >= 2")
    if p.kind == "laplace" and t.objective == OBJECTIVE_FLOW:
        raise ConfigError("laplace posterior is defined for the noise-prediction objective")
    if not 0.0 < p.fit_fraction <= 1.0:
        raise ConfigError("posterior.fit_fraction must lie in (0, 1]")
    if sc.mc_samples < 1:
        raise ConfigError("scoring.mc_samples must be >= 1")
    if p.kind == "ensemble" and sc.mc_samples > p.members:
        raise ConfigError("scoring.mc_samples cannot exceed posterior.members")
    if sc.sampler not in (SAMPLER_DDPM, SAMPLER_DDIM, SAMPLER_FLOW):
        raise ConfigError(f"unknown scoring.sampler {sc.sampler!r}")
    if t.objective == OBJECTIVE_FLOW and sc.sampler != SAMPLER_FLOW:
        raise ConfigError("flow models must score with the flow-euler sampler")
    if t.objective == OBJECTIVE_EPSILON and sc.sampler == SAMPLER_FLOW:
        raise ConfigError("noise-prediction models cannot score with flow-euler")
    if sc.sampler in (SAMPLER_DDPM, SAMPLER_DDIM) and sc.steps > t.schedule_steps:
        raise ConfigError("scoring.steps cannot exceed train.schedule_steps")
    if sc.sem_noise <= 0:
        raise ConfigError("scoring.sem_noise must be positive")
    if sc.feature_kind not in ("identity", "random-projection", "embedding-file"):
        raise ConfigError(f"unknown scoring.feature_kind {sc.feature_kind!r}")
    if sc.feature_kind == "embedding-file" and not sc.embedding_path:
        raise ConfigError("embedding-file features require scoring.embedding_path")
    for n in f.n_grid:
        if not 1 <= n <= s.count:
            raise ConfigError(f"filtering.n_grid entry {n} outside [1, {s.count}]")
    for name in f.scores:
        allowed = {"entropy", "realism", "rarity"}
        parts = name.split("+")
        if not parts or any(part not in allowed for part in parts):
            raise ConfigError(f"unknown filter score {name!r}")
    if f.baseline_count < 1:
        raise ConfigError("filtering.baseline_count must be >= 1")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    version = doc.pop("version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(
            f"config version must be {CONFIG_VERSION}, got {version!r}"
        )
    _check_keys({**doc, "version": version})
    cfg = ExperimentConfig(
        seed=doc.get("seed", 0),
        output_dir=doc.get("output_dir", "runs/out"),
        threads=doc.get("threads", 1),
        dataset=_merge(DatasetSection, doc.get("dataset", {})),
        train=_merge(TrainSection, doc.get("train", {})),
        sampling=_merge(SamplingSection, doc.get("sampling", {})),
        posterior=_merge(PosteriorSection, doc.get("posterior", {})),
        scoring=_merge(ScoringSection, doc.get("scoring", {})),
        filtering=_merge(FilterSection, doc.get("filtering", {})),
    )
    return validate(cfg)


def load_config(path: str | Path, seed: int | None = None,
                output_dir: str | None = None, threads: int | None = None) -> ExperimentConfig:
    """Parse and validate a config file, applying CLI overrides."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    if seed is not None:
        doc["seed"] = seed
    if output_dir is not None:
        doc["output_dir"] = output_dir
    if threads is not None:
        doc["threads"] = threads
    return config_from_dict(doc)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def section(obj) -> dict:
        out = {}
        for name, value in vars(obj).items():
            out[name] = list(value) if isinstance(value, tuple) else value
        return out

    return {
        "version": CONFIG_VERSION,
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "threads": cfg.threads,
        "dataset": section(cfg.dataset),
        "train": section(cfg.train),
        "sampling": section(cfg.sampling),
        "posterior": section(cfg.posterior),
        "scoring": section(cfg.scoring),
        "filtering": section(cfg.filtering),
    }


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of the resolved config, excluding fields that do not affect
    results (output location, worker count)."""
    doc = config_to_dict(cfg)
    doc.pop("output_dir")
    doc.pop("threads")
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
