"""Noise schedules, forward corruption, denoising losses, and samplers.

Supports three sampling rules over a trained denoiser:

* ``ddpm``    - stochastic ancestral updates, one noise draw per step,
  posterior (lower-bound) variance, optional timestep respacing;
* ``ddim``    - predicted-clean-point updates with stochasticity ``eta``
  (``eta=0`` is fully deterministic given the initial noise);
* ``flow-euler`` - fixed-step Euler integration of a learned velocity field
  from ``t=1`` (noise) to ``t=0`` (data).

All randomness consumed by one trajectory is captured in a ``SeedBundle``
so the same trajectory can be replayed under different frozen weights.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NumericError
from .nn import MlpConfig, ParamVector, mlp_backward, mlp_forward_batch
from .rng import RngState, integers, normal

OBJECTIVE_EPSILON = "epsilon-prediction"
OBJECTIVE_FLOW = "flow-velocity"
OBJECTIVES = (OBJECTIVE_EPSILON, OBJECTIVE_FLOW)

SAMPLER_DDPM = "ddpm"
SAMPLER_DDIM = "ddim"
SAMPLER_FLOW = "flow-euler"

# Velocity networks see t scaled to [0, 1000] so the sinusoidal embedding
# resolves nearby times; must match between training and the Euler sampler.
FLOW_TIME_SCALE = 1000.0

TERMINAL_ALPHA_BAR = 0.01


def child_seed(root: int, *path: int) -> int:
    """Derive an independent 64-bit stream seed from a root seed and an
    integer path, stable across platforms."""
    h = hashlib.sha256()
    for part in (root, *path):
        h.update(struct.pack("<Q", int(part) & ((1 << 64) - 1)))
    return int.from_bytes(h.digest()[:8], "little")


# Stream ids used to partition a run seed into independent purposes.
STREAM_TRAIN = 1
STREAM_SAMPLING = 2
STREAM_WEIGHTS = 3
STREAM_FISHER = 4
STREAM_BASELINE = 5
STREAM_DATASET = 6
STREAM_COND = 7


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise rates and their cumulative signal fractions.

    ``alpha_bars[t-1]`` is the squared signal coefficient after ``t``
    corruption steps; the terminal value must be below 0.01 so the final
    marginal is close to a standard normal.
    """

    betas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        abars = np.asarray(self.alpha_bars, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abars)
        if betas.ndim != 1 or betas.size == 0 or abars.shape != betas.shape:
            raise DimensionError("betas and alpha_bars must be equal-length 1-D")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise NumericError("betas must lie strictly inside (0, 1)")
        if np.any(np.diff(abars) >= 0.0):
            raise NumericError("alpha_bars must be strictly decreasing")
        if abars[-1] >= TERMINAL_ALPHA_BAR:
            raise NumericError(
                f"terminal alpha_bar {abars[-1]:.4g} >= {TERMINAL_ALPHA_BAR}; "
                "schedule does not reach a near-Gaussian terminal marginal"
            )

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @classmethod
    def from_betas(cls, betas: np.ndarray) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        return cls(betas, np.cumprod(1.0 - betas))

    @classmethod
    def linear(cls, T: int, beta_start: float | None = None,
               beta_end: float | None = None) -> "NoiseSchedule":
        """Linear betas; endpoints default to 1e-4..0.02 scaled by 1000/T so
        shorter schedules still drive the terminal marginal to noise."""
        scale = 1000.0 / T
        if beta_start is None:
            beta_start = 1e-4 * scale
        if beta_end is None:
            beta_end = 0.02 * scale
        return cls.from_betas(np.linspace(beta_start, beta_end, T))

    @classmethod
    def cosine(cls, T: int, s: float = 0.008, max_beta: float = 0.999) -> "NoiseSchedule":
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1.0 + s) * np.pi / 2.0) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], 1e-8, max_beta)
        return cls.from_betas(betas)


def corrupt(x0: np.ndarray, alpha_bar, eps: np.ndarray) -> np.ndarray:
    """Closed-form corruption: sqrt(a)*x0 + sqrt(1-a)*eps."""
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    return np.sqrt(alpha_bar) * np.asarray(x0) + np.sqrt(1.0 - alpha_bar) * np.asarray(eps)


def forward_noise(schedule: NoiseSchedule, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Corrupt ``x0`` to step ``t`` (1-based) with externally drawn noise."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t={t} outside [1, {schedule.T}]")
    return corrupt(x0, schedule.alpha_bars[t - 1], eps)


def respaced_timesteps(T: int, steps: int) -> tuple[int, ...]:
    """Evenly spaced strictly increasing subsequence of 1..T ending at T."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps={steps} outside [1, {T}]")
    return tuple(int(np.floor((j + 1) * T / steps)) for j in range(steps))


@dataclass(frozen=True)
class SamplerSpec:
    """Which transition rule to run and on which timestep subsequence."""

    kind: str
    steps: int
    eta: float = 0.0
    step_schedule: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind not in (SAMPLER_DDPM, SAMPLER_DDIM, SAMPLER_FLOW):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if len(self.step_schedule) != self.steps:
            raise ValueError("step_schedule length must equal steps")
        if any(b <= a for a, b in zip(self.step_schedule, self.step_schedule[1:])):
            raise ValueError("step_schedule must be strictly increasing")

    @property
    def needs_step_noise(self) -> bool:
        return self.kind == SAMPLER_DDPM or (self.kind == SAMPLER_DDIM and self.eta > 0.0)

    @classmethod
    def ddpm(cls, T: int, steps: int | None = None) -> "SamplerSpec":
        steps = T if steps is None else steps
        return cls(SAMPLER_DDPM, steps, 1.0, respaced_timesteps(T, steps))

    @classmethod
    def ddim(cls, T: int, steps: int, eta: float = 0.0) -> "SamplerSpec":
        return cls(SAMPLER_DDIM, steps, eta, respaced_timesteps(T, steps))

    @classmethod
    def flow_euler(cls, steps: int) -> "SamplerSpec":
        return cls(SAMPLER_FLOW, steps, 0.0, tuple(range(1, steps + 1)))


@dataclass
class SeedBundle:
    """All randomness consumed by one sampling trajectory.

    Replaying the bundle through any frozen parameter vector is fully
    deterministic: stochastic samplers read their per-step draws from
    ``per_step_noises`` instead of a live generator.
    """

    seed_id: int
    initial_noise: np.ndarray
    per_step_noises: np.ndarray | None = None


def make_seed_bundle(
    root_seed: int,
    seed_id: int,
    dim: int,
    spec: SamplerSpec,
    noise_stream: int = 0,
) -> SeedBundle:
    """Derive the bundle for ``seed_id`` from the run seed.

    The initial noise depends only on ``(root_seed, seed_id)``, so bundles
    built for different samplers or streams share their starting point;
    per-step noise blocks are separated by ``noise_stream``.
    """
    base = RngState(child_seed(root_seed, STREAM_SAMPLING, seed_id))
    initial, _ = normal(base, (dim,))
    steps = None
    if spec.needs_step_noise:
        steps, _ = normal(base.advance(1 + noise_stream), (spec.steps, dim))
    return SeedBundle(seed_id, initial, steps)


class NfeMeter:
    """Counts denoiser forward evaluations (one per sample per step).

    Thread-safe so parallel scoring chunks can share one meter.
    """

    def __init__(self):
        self.total = 0
        self._lock = threading.Lock()

    def add(self, n: int) -> None:
        with self._lock:
            self.total += int(n)


def _stack_bundles(bundles: list[SeedBundle], spec: SamplerSpec):
    init = np.stack([b.initial_noise for b in bundles])
    step_noise = None
    if spec.needs_step_noise:
        missing = [b.seed_id for b in bundles if b.per_step_noises is None]
        if missing:
            raise NumericError(
                f"sampler {spec.kind!r} (eta={spec.eta}) needs per-step noises; "
                f"missing for seed ids {missing[:5]}"
            )
        step_noise = np.stack([b.per_step_noises for b in bundles])
        if step_noise.shape[1] != spec.steps:
            raise DimensionError(
                f"per-step noises cover {step_noise.shape[1]} steps, "
                f"sampler takes {spec.steps}"
            )
    return init, step_noise


def sample_batch(
    cfg: MlpConfig,
    params: ParamVector,
    schedule: NoiseSchedule | None,
    spec: SamplerSpec,
    bundles: list[SeedBundle],
    cond: np.ndarray | None = None,
    meter: NfeMeter | None = None,
) -> np.ndarray:
    """Run one sampler over a batch of seed bundles under frozen weights."""
    if not bundles:
        return np.zeros((0, cfg.input_dim))
    x, step_noise = _stack_bundles(bundles, spec)
    if x.shape[1] != cfg.input_dim:
        raise DimensionError(
            f"bundle noise dim {x.shape[1]} != model dim {cfg.input_dim}", layer="input"
        )
    n = x.shape[0]

    if spec.kind == SAMPLER_FLOW:
        dt = 1.0 / spec.steps
        for k in range(spec.steps):
            t_k = 1.0 - k * dt
            ts = np.full(n, FLOW_TIME_SCALE * t_k)
            v, _ = mlp_forward_batch(cfg, params, x, ts, cond)
            if meter is not None:
                meter.add(n)
            x = x - dt * v
        return x

    if schedule is None:
        raise NumericError(f"sampler {spec.kind!r} requires a noise schedule")
    if spec.steps > schedule.T or spec.step_schedule[-1] > schedule.T:
        raise DimensionError("step schedule exceeds the noise schedule length")

    abars = schedule.alpha_bars
    taus = spec.step_schedule
    for i in range(spec.steps - 1, -1, -1):
        t_cur = taus[i]
        abar_cur = abars[t_cur - 1]
        abar_prev = abars[taus[i - 1] - 1] if i > 0 else 1.0
        ts = np.full(n, float(t_cur))
        eps_hat, _ = mlp_forward_batch(cfg, params, x, ts, cond)
        if meter is not None:
            meter.add(n)

        if spec.kind == SAMPLER_DDPM:
            alpha_r = abar_cur / abar_prev
            beta_r = 1.0 - alpha_r
            mean = (x - beta_r / np.sqrt(1.0 - abar_cur) * eps_hat) / np.sqrt(alpha_r)
            var = (1.0 - abar_prev) / (1.0 - abar_cur) * beta_r
            x = mean + np.sqrt(var) * step_noise[:, i, :]
        else:
            x0_pred = (x - np.sqrt(1.0 - abar_cur) * eps_hat) / np.sqrt(abar_cur)
            sigma = spec.eta * np.sqrt(
                (1.0 - abar_prev) / (1.0 - abar_cur) * (1.0 - abar_cur / abar_prev)
            )
            dir_coef = np.sqrt(max(1.0 - abar_prev - sigma**2, 0.0))
            x = np.sqrt(abar_prev) * x0_pred + dir_coef * eps_hat
            if spec.eta > 0.0:
                x = x + sigma * step_noise[:, i, :]
    return x


def sample(
    cfg: MlpConfig,
    params: ParamVector,
    schedule: NoiseSchedule | None,
    spec: SamplerSpec,
    bundle: SeedBundle,
    cond: int | None = None,
    meter: NfeMeter | None = None,
) -> np.ndarray:
    """Single-trajectory generation; deterministic given (params, bundle)."""
    conds = None if cond is None else np.array([cond])
    out = sample_batch(cfg, params, schedule, spec, [bundle], conds, meter)
    return out[0]


def diffusion_loss(
    cfg: MlpConfig,
    params: ParamVector,
    schedule: NoiseSchedule,
    x0: np.ndarray,
    cond: np.ndarray | None,
    state: RngState,
) -> tuple[float, ParamVector, RngState]:
    """Monte Carlo denoising regression loss and its parameter gradient.

    Per batch row: t uniform on {1..T}, fresh Gaussian noise, squared error
    between the predicted and the true noise summed over coordinates, then
    averaged over the batch.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise DimensionError("empty batch")
    ts, state = integers(state, 1, schedule.T + 1, x0.shape[0])
    eps, state = normal(state, x0.shape)
    xt = corrupt(x0, schedule.alpha_bars[ts - 1][:, None], eps)
    y, cache = mlp_forward_batch(cfg, params, xt, ts.astype(np.float64), cond)
    resid = y - eps
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    if not np.isfinite(loss):
        raise NumericError(
            f"non-finite loss on batch of {x0.shape[0]} "
            f"(|x0|max={np.abs(x0).max():.3g}, t range {ts.min()}..{ts.max()})"
        )
    grad = mlp_backward(cfg, params, cache, 2.0 * resid / x0.shape[0])
    return loss, grad, state


def flow_matching_loss(
    cfg: MlpConfig,
    params: ParamVector,
    x0: np.ndarray,
    cond: np.ndarray | None,
    state: RngState,
) -> tuple[float, ParamVector, RngState]:
    """Velocity regression along the linear path (1-t)*x0 + t*x1.

    The target is the straight-line velocity x1 - x0 with x1 standard
    normal and t uniform on [0, 1].
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] == 0:
        raise DimensionError("empty batch")
    gen = state.generator()
    ts = gen.uniform(0.0, 1.0, size=x0.shape[0])
    state = state.advance()
    x1, state = normal(state, x0.shape)
    xt = (1.0 - ts[:, None]) * x0 + ts[:, None] * x1
    target = x1 - x0
    y, cache = mlp_forward_batch(cfg, params, xt, FLOW_TIME_SCALE * ts, cond)
    resid = y - target
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    if not np.isfinite(loss):
        raise NumericError(f"non-finite flow loss on batch of {x0.shape[0]}")
    grad = mlp_backward(cfg, params, cache, 2.0 * resid / x0.shape[0])
    return loss, grad, state
