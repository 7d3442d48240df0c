"""Training loop for the denoiser: Adam on the chosen regression objective
with an exponential moving average of the weights maintained alongside."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .diffusion import (
    OBJECTIVE_EPSILON,
    OBJECTIVE_FLOW,
    OBJECTIVES,
    STREAM_TRAIN,
    NoiseSchedule,
    child_seed,
    diffusion_loss,
    flow_matching_loss,
)
from .errors import ConfigError, NumericError
from .nn import MlpConfig, ParamVector, adam_init, adam_step, init_params
from .rng import RngState, permutation

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 128
    lr: float = 1e-3
    ema_decay: float = 0.999
    objective: str = OBJECTIVE_EPSILON
    seed: int = 0
    mlp: MlpConfig = field(default_factory=lambda: MlpConfig(input_dim=2))
    schedule_kind: str = "linear"
    schedule_steps: int = 1000
    beta_start: float | None = None
    beta_end: float | None = None

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, batch_size >= 1, lr > 0 required")
        if self.schedule_kind not in ("linear", "cosine"):
            raise ConfigError(f"unknown schedule kind {self.schedule_kind!r}")

    def build_schedule(self) -> NoiseSchedule | None:
        if self.objective == OBJECTIVE_FLOW:
            return None
        if self.schedule_kind == "cosine":
            return NoiseSchedule.cosine(self.schedule_steps)
        return NoiseSchedule.linear(self.schedule_steps, self.beta_start, self.beta_end)


def _write_trace(path: str | Path, rows: list[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        for epoch, loss in rows:
            writer.writerow([epoch, repr(float(loss))])


def train(
    cfg: TrainConfig,
    x0: np.ndarray,
    cond: np.ndarray | None = None,
    loss_trace_path: str | Path | None = None,
) -> Checkpoint:
    """Fit the denoiser and return raw plus EMA weights.

    Deterministic in (cfg, data): initialization, shuffling, and the loss
    noise draws all derive from cfg.seed. Aborts if the running loss
    exceeds the divergence limit.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    if cfg.batch_size > n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    if x0.shape[1] != cfg.mlp.input_dim:
        raise ConfigError(
            f"dataset dim {x0.shape[1]} != model input dim {cfg.mlp.input_dim}"
        )

    schedule = cfg.build_schedule()
    params = init_params(cfg.mlp, child_seed(cfg.seed, STREAM_TRAIN, 0))
    ema = params.copy()
    adam = adam_init(params.size, lr=cfg.lr)
    shuffle_state = RngState(child_seed(cfg.seed, STREAM_TRAIN, 1))
    loss_state = RngState(child_seed(cfg.seed, STREAM_TRAIN, 2))

    trace: list[tuple[int, float]] = []
    for epoch in range(cfg.epochs):
        order, shuffle_state = permutation(shuffle_state, n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch_cond = None if cond is None else cond[idx]
            if cfg.objective == OBJECTIVE_EPSILON:
                loss, grad, loss_state = diffusion_loss(
                    cfg.mlp, params, schedule, x0[idx], batch_cond, loss_state
                )
            else:
                loss, grad, loss_state = flow_matching_loss(
                    cfg.mlp, params, x0[idx], batch_cond, loss_state
                )
            if loss > DIVERGENCE_LIMIT:
                raise NumericError(
                    f"training diverged at epoch {epoch}: loss {loss:.3g} "
                    f"> {DIVERGENCE_LIMIT:.0e}"
                )
            params, adam = adam_step(adam, params, grad)
            ema = ParamVector(
                cfg.ema_decay * ema.values + (1.0 - cfg.ema_decay) * params.values,
                params.layout,
            )
            epoch_losses.append(loss)
        trace.append((epoch, float(np.mean(epoch_losses))))

    if loss_trace_path is not None:
        _write_trace(loss_trace_path, trace)

    return Checkpoint(
        mlp=cfg.mlp,
        params=params,
        ema_params=ema,
        ema_decay=cfg.ema_decay,
        objective=cfg.objective,
        schedule=schedule,
        seed=cfg.seed,
        meta={"epoch_losses": [loss for _, loss in trace]},
    )


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
