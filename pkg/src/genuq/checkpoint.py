"""Self-describing checkpoint container.

A checkpoint is a canonical JSON document holding the network config, the
parameter layout, raw and EMA weight arrays, the noise schedule (for noise
prediction models), and training metadata. Serialization uses the shortest
round-trip float representation, so identical in-memory checkpoints produce
byte-identical files and hashes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import OBJECTIVES, NoiseSchedule
from .errors import HashMismatchError
from .nn import MlpConfig, ParamVector, param_layout

FORMAT = "genuq-checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    mlp: MlpConfig
    params: ParamVector
    ema_params: ParamVector
    ema_decay: float
    objective: str
    schedule: NoiseSchedule | None
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")

    @property
    def sampling_params(self) -> ParamVector:
        """Weights used for generation (the EMA track)."""
        return self.ema_params


def _mlp_to_dict(cfg: MlpConfig) -> dict:
    return {
        "input_dim": cfg.input_dim,
        "hidden_dims": list(cfg.hidden_dims),
        "output_dim": cfg.output_dim,
        "activation": cfg.activation,
        "time_embed_dim": cfg.time_embed_dim,
        "condition_count": cfg.condition_count,
    }


def _mlp_from_dict(d: dict) -> MlpConfig:
    return MlpConfig(
        input_dim=d["input_dim"],
        hidden_dims=tuple(d["hidden_dims"]),
        output_dim=d["output_dim"],
        activation=d["activation"],
        time_embed_dim=d["time_embed_dim"],
        condition_count=d["condition_count"],
    )


def checkpoint_to_dict(ckpt: Checkpoint) -> dict:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "mlp_config": _mlp_to_dict(ckpt.mlp),
        "layout": [[name, list(shape), off] for name, shape, off in ckpt.params.layout],
        "params": ckpt.params.values.tolist(),
        "ema_params": ckpt.ema_params.values.tolist(),
        "ema_decay": ckpt.ema_decay,
        "objective": ckpt.objective,
        "schedule": None,
        "seed": ckpt.seed,
        "meta": ckpt.meta,
    }
    if ckpt.schedule is not None:
        doc["schedule"] = {"betas": ckpt.schedule.betas.tolist()}
    return doc


def checkpoint_from_dict(doc: dict) -> Checkpoint:
    if doc.get("format") != FORMAT:
        raise HashMismatchError(f"not a checkpoint file (format={doc.get('format')!r})")
    if doc.get("version") != VERSION:
        raise HashMismatchError(f"unsupported checkpoint version {doc.get('version')!r}")
    mlp = _mlp_from_dict(doc["mlp_config"])
    layout = param_layout(mlp)
    stored = tuple((n, tuple(s), o) for n, s, o in doc["layout"])
    if stored != layout:
        raise HashMismatchError("stored layout does not match the stored config")
    schedule = None
    if doc["schedule"] is not None:
        schedule = NoiseSchedule.from_betas(np.array(doc["schedule"]["betas"]))
    return Checkpoint(
        mlp=mlp,
        params=ParamVector(np.array(doc["params"]), layout),
        ema_params=ParamVector(np.array(doc["ema_params"]), layout),
        ema_decay=doc["ema_decay"],
        objective=doc["objective"],
        schedule=schedule,
        seed=doc["seed"],
        meta=doc.get("meta", {}),
    )


def canonical_bytes(ckpt: Checkpoint) -> bytes:
    return json.dumps(checkpoint_to_dict(ckpt), sort_keys=True,
                      separators=(",", ":")).encode()


def checkpoint_hash(ckpt: Checkpoint) -> str:
    return hashlib.sha256(canonical_bytes(ckpt)).hexdigest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> str:
    """Write the container and return its content hash."""
    data = canonical_bytes(ckpt)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> Checkpoint:
    return checkpoint_from_dict(json.loads(Path(path).read_text()))


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
