"""Dense-math substrate: a small MLP with hand-written forward and backward
passes, a flat parameter vector with a named layout, the Adam optimizer, and
a central finite-difference gradient checker.

The denoiser is an MLP over ``concat(x, time_embedding(t) + cond_embedding)``
with a configurable stack of hidden layers and a final linear map. All math
is float64 numpy; there is no autodiff. Gradients are exact analytic
expressions checked against finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, StaleCacheError
from .rng import RngState

ACTIVATIONS = ("relu", "silu", "tanh")


@dataclass(frozen=True)
class MlpConfig:
    """Architecture of the denoising network."""

    input_dim: int
    hidden_dims: tuple[int, ...] = (128, 128, 128)
    output_dim: int | None = None
    activation: str = "silu"
    time_embed_dim: int = 32
    condition_count: int = 0

    def __post_init__(self):
        if self.output_dim is None:
            object.__setattr__(self, "output_dim", self.input_dim)
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if len(self.hidden_dims) < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("at least one positive hidden layer is required")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be a positive even number")
        if self.condition_count < 0:
            raise ValueError("condition_count must be >= 0")

    @property
    def in_features(self) -> int:
        return self.input_dim + self.time_embed_dim


def param_layout(cfg: MlpConfig) -> tuple[tuple[str, tuple[int, ...], int], ...]:
    """Deterministic (name, shape, offset) descriptors for the flat vector.

    The final linear map is always last so its coordinates form the tail
    slice used by the last-layer posterior.
    """
    entries: list[tuple[str, tuple[int, ...]]] = []
    if cfg.condition_count > 0:
        entries.append(("cond_embed.weight", (cfg.condition_count, cfg.time_embed_dim)))
    prev = cfg.in_features
    for i, h in enumerate(cfg.hidden_dims):
        entries.append((f"hidden{i}.weight", (h, prev)))
        entries.append((f"hidden{i}.bias", (h,)))
        prev = h
    entries.append(("out.weight", (cfg.output_dim, prev)))
    entries.append(("out.bias", (cfg.output_dim,)))

    layout = []
    offset = 0
    for name, shape in entries:
        layout.append((name, shape, offset))
        offset += int(np.prod(shape))
    return tuple(layout)


@dataclass
class ParamVector:
    """Flat float64 value array plus the layout describing its slices."""

    values: np.ndarray
    layout: tuple[tuple[str, tuple[int, ...], int], ...]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        total = sum(int(np.prod(shape)) for _, shape, _ in self.layout)
        if total != self.values.size:
            raise DimensionError(
                f"layout covers {total} values but array has {self.values.size}",
                layer="<layout>",
            )
        offset = 0
        for name, shape, off in self.layout:
            if off != offset:
                raise DimensionError(f"non-contiguous offset for {name}", layer=name)
            offset += int(np.prod(shape))
        if not np.all(np.isfinite(self.values)):
            idx = int(np.argmin(np.isfinite(self.values)))
            raise NumericError(f"non-finite parameter at flat index {idx}", index=idx)

    def slice_for(self, name: str) -> slice:
        for lname, shape, off in self.layout:
            if lname == name:
                return slice(off, off + int(np.prod(shape)))
        raise KeyError(name)

    def get(self, name: str) -> np.ndarray:
        for lname, shape, off in self.layout:
            if lname == name:
                return self.values[off : off + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def set(self, name: str, value: np.ndarray) -> None:
        view = self.get(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != view.shape:
            raise DimensionError(
                f"expected shape {view.shape} for {name}, got {value.shape}", layer=name
            )
        view[...] = value

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def fingerprint(self) -> int:
        return hash(self.values.tobytes())

    @property
    def size(self) -> int:
        return self.values.size


def init_params(cfg: MlpConfig, seed: int) -> ParamVector:
    """Kaiming-uniform fan-in initialization with zero biases, fixed by seed."""
    layout = param_layout(cfg)
    values = np.zeros(sum(int(np.prod(s)) for _, s, _ in layout))
    params = ParamVector(values, layout)
    state = RngState(seed)
    for name, shape, _ in layout:
        if name.endswith(".bias"):
            continue
        fan_in = shape[1] if len(shape) == 2 else shape[-1]
        bound = math.sqrt(3.0 / fan_in)
        draws = state.generator().uniform(-bound, bound, size=shape)
        state = state.advance()
        params.set(name, draws)
    return params


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding; pairs of (sin, cos) at geometrically spaced
    frequencies spanning periods up to 10000."""
    half = dim // 2
    t = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-np.arange(half) / half)
    angles = t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def _activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "silu":
        return z / (1.0 + np.exp(-z))
    return np.tanh(z)


def _activation_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "silu":
        s = 1.0 / (1.0 + np.exp(-z))
        return s * (1.0 + z * (1.0 - s))
    th = np.tanh(z)
    return 1.0 - th * th


@dataclass
class MlpCache:
    """Activations saved by a batched forward pass, consumed by backward."""

    inputs: list[np.ndarray] = field(default_factory=list)
    pre_acts: list[np.ndarray] = field(default_factory=list)
    conds: np.ndarray | None = None
    params_fingerprint: int = 0
    batch_size: int = 0


def mlp_forward_batch(
    cfg: MlpConfig,
    params: ParamVector,
    x: np.ndarray,
    t: np.ndarray,
    cond: np.ndarray | None = None,
) -> tuple[np.ndarray, MlpCache]:
    """Evaluate the network on a batch, retaining activations for backward.

    ``x`` is ``(B, input_dim)``, ``t`` is ``(B,)``, ``cond`` an optional
    ``(B,)`` integer array of condition ids.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64).ravel()
    if x.shape[1] != cfg.input_dim:
        raise DimensionError(
            f"input has {x.shape[1]} features, expected {cfg.input_dim}", layer="input"
        )
    if t.shape[0] != x.shape[0]:
        raise DimensionError("t must have one entry per batch row", layer="input")

    emb = time_embedding(t, cfg.time_embed_dim)
    if cond is not None:
        if cfg.condition_count == 0:
            raise DimensionError("model is unconditional", layer="cond_embed")
        cond = np.asarray(cond, dtype=np.int64).ravel()
        if cond.min() < 0 or cond.max() >= cfg.condition_count:
            raise DimensionError(
                f"condition id out of range [0, {cfg.condition_count})",
                layer="cond_embed",
            )
        emb = emb + params.get("cond_embed.weight")[cond]

    cache = MlpCache(
        conds=cond,
        params_fingerprint=params.fingerprint(),
        batch_size=x.shape[0],
    )
    h = np.concatenate([x, emb], axis=1)
    for i in range(len(cfg.hidden_dims)):
        w = params.get(f"hidden{i}.weight")
        b = params.get(f"hidden{i}.bias")
        cache.inputs.append(h)
        z = h @ w.T + b
        cache.pre_acts.append(z)
        h = _activation(cfg.activation, z)
    cache.inputs.append(h)
    y = h @ params.get("out.weight").T + params.get("out.bias")
    return y, cache


def mlp_forward(
    cfg: MlpConfig,
    params: ParamVector,
    x: np.ndarray,
    t: float,
    cond: int | None = None,
) -> np.ndarray:
    """Single-sample forward pass; deterministic in its inputs."""
    conds = None if cond is None else np.array([cond])
    y, _ = mlp_forward_batch(cfg, params, np.asarray(x)[None, :], np.array([t]), conds)
    return y[0]


def mlp_backward(
    cfg: MlpConfig,
    params: ParamVector,
    cache: MlpCache,
    dout: np.ndarray,
) -> ParamVector:
    """Backpropagate upstream output gradients through the cached batch.

    The returned gradient shares the parameter layout. Raises
    ``StaleCacheError`` when ``params`` changed since the forward pass.
    """
    if cache.params_fingerprint != params.fingerprint():
        raise StaleCacheError("activations were computed for different weights")
    dout = np.atleast_2d(np.asarray(dout, dtype=np.float64))
    if dout.shape != (cache.batch_size, cfg.output_dim):
        raise DimensionError(
            f"output gradient shape {dout.shape}, expected "
            f"({cache.batch_size}, {cfg.output_dim})",
            layer="out",
        )

    grad = params.zeros_like()
    grad.set("out.weight", dout.T @ cache.inputs[-1])
    grad.set("out.bias", dout.sum(axis=0))
    dh = dout @ params.get("out.weight")
    for i in reversed(range(len(cfg.hidden_dims))):
        dz = dh * _activation_grad(cfg.activation, cache.pre_acts[i])
        grad.set(f"hidden{i}.weight", dz.T @ cache.inputs[i])
        grad.set(f"hidden{i}.bias", dz.sum(axis=0))
        dh = dz @ params.get(f"hidden{i}.weight")

    if cfg.condition_count > 0 and cache.conds is not None:
        demb = dh[:, cfg.input_dim :]
        table_grad = np.zeros((cfg.condition_count, cfg.time_embed_dim))
        np.add.at(table_grad, cache.conds, demb)
        grad.set("cond_embed.weight", table_grad)
    return grad


@dataclass(frozen=True)
class AdamState:
    """Bias-corrected Adam moments; shapes track the flat parameter vector."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("lr and eps must be positive")


def adam_init(n_params: int, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(np.zeros(n_params), np.zeros(n_params), 0, lr, beta1, beta2, eps)


def adam_step(
    state: AdamState, params: ParamVector, grad: ParamVector
) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    g = grad.values
    if g.shape != params.values.shape:
        raise DimensionError("gradient/parameter length mismatch", layer="<flat>")
    finite = np.isfinite(g)
    if not finite.all():
        idx = int(np.argmin(finite))
        raise NumericError(f"non-finite gradient at flat index {idx}", index=idx)

    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_values = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_params = ParamVector(new_values, params.layout)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_params, new_state


def fd_gradient(f, params: ParamVector, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of the
    parameter vector. O(n) function evaluations per coordinate pair; meant
    for small test instances only."""
    base = params.values
    out = np.zeros_like(base)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + h
        f_plus = f(ParamVector(bumped, params.layout))
        bumped[i] = base[i] - h
        f_minus = f(ParamVector(bumped, params.layout))
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return out


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Worst-case per-coordinate relative difference with a small-magnitude
    floor in the denominator so near-zero coordinates do not dominate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
