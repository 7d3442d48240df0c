"""Approximate posteriors over denoiser weights.

Two variants: deep ensembles (independently seeded trainings) and a
post-hoc last-layer Gaussian fitted at the trained weights with a diagonal
empirical Fisher curvature estimate. Weight draws splice perturbed
last-layer coordinates into a copy of the pretrained vector, leaving every
other coordinate untouched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, checkpoint_hash, load_checkpoint
from .diffusion import (
    OBJECTIVE_EPSILON,
    STREAM_FISHER,
    STREAM_WEIGHTS,
    NoiseSchedule,
    child_seed,
    corrupt,
)
from .errors import ConfigError, HashMismatchError, NumericError
from .nn import MlpConfig, ParamVector, mlp_forward_batch
from .rng import RngState
from .training import TrainConfig, train, with_seed

ENSEMBLE = "ensemble"
LAPLACE = "laplace-last-layer"

LAST_LAYER_PARAMS = ("out.weight", "out.bias")

LAPLACE_FORMAT = "genuq-laplace"
ENSEMBLE_FORMAT = "genuq-ensemble"
FILE_VERSION = 1


def last_layer_slice(params: ParamVector) -> slice:
    """Contiguous flat slice covering the final linear map."""
    start = params.slice_for(LAST_LAYER_PARAMS[0]).start
    stop = params.slice_for(LAST_LAYER_PARAMS[-1]).stop
    return slice(start, stop)


@dataclass
class LaplaceState:
    """Gaussian over the last-layer weights, centered at the trained values.

    posterior_variance = observation_noise^2 / (fisher_diag + prior_precision)
    elementwise.
    """

    mean: np.ndarray
    fisher_diag: np.ndarray
    prior_precision: float
    observation_noise: float
    posterior_variance: np.ndarray
    source_hash: str

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.fisher_diag = np.asarray(self.fisher_diag, dtype=np.float64)
        self.posterior_variance = np.asarray(self.posterior_variance, dtype=np.float64)
        if not (self.mean.shape == self.fisher_diag.shape == self.posterior_variance.shape):
            raise ConfigError("laplace arrays must share one length")
        if self.prior_precision <= 0 or self.observation_noise <= 0:
            raise ConfigError("prior precision and observation noise must be positive")
        if np.any(self.fisher_diag < 0):
            raise NumericError("fisher diagonal has negative entries")
        if not np.all(np.isfinite(self.posterior_variance)) or np.any(
            self.posterior_variance <= 0
        ):
            raise NumericError("posterior variance must be strictly positive and finite")


@dataclass
class PosteriorSpec:
    """Exactly one of the two posterior variants, ready for weight draws."""

    kind: str
    members: list[Checkpoint] | None = None
    laplace: LaplaceState | None = None
    base: Checkpoint | None = None

    def __post_init__(self):
        if self.kind == ENSEMBLE:
            if not self.members or len(self.members) < 2:
                raise ConfigError("an ensemble needs at least 2 members")
            if self.laplace is not None:
                raise ConfigError("ensemble posterior must not carry a laplace state")
        elif self.kind == LAPLACE:
            if self.laplace is None or self.base is None:
                raise ConfigError("laplace posterior needs a state and a base checkpoint")
            if self.members is not None:
                raise ConfigError("laplace posterior must not carry members")
        else:
            raise ConfigError(f"unknown posterior kind {self.kind!r}")

    @property
    def member_count(self) -> int | None:
        return None if self.members is None else len(self.members)


def _per_example_draw(seed: int, index: int, T: int, dim: int):
    """One (t, eps) corruption draw per example, keyed by the example's
    global index so disjoint fit subsets accumulate independent terms."""
    gen = RngState(child_seed(seed, STREAM_FISHER, index)).generator()
    t = int(gen.integers(1, T + 1))
    eps = gen.standard_normal(dim)
    return t, eps


def last_layer_example_grad(
    cfg: MlpConfig,
    params: ParamVector,
    schedule: NoiseSchedule,
    x0: np.ndarray,
    cond: int | None,
    t: int,
    eps: np.ndarray,
) -> np.ndarray:
    """Flat gradient of one example's denoising loss over the final layer."""
    xt = corrupt(x0, schedule.alpha_bars[t - 1], eps)
    conds = None if cond is None else np.array([cond])
    y, cache = mlp_forward_batch(cfg, params, xt[None, :], np.array([float(t)]), conds)
    dy = 2.0 * (y[0] - eps)
    grad_w = np.outer(dy, cache.inputs[-1][0])
    return np.concatenate([grad_w.ravel(), dy])


def fisher_diag_for_examples(
    cfg: MlpConfig,
    params: ParamVector,
    schedule: NoiseSchedule,
    x0: np.ndarray,
    cond: np.ndarray | None,
    indices: np.ndarray,
    seed: int,
) -> np.ndarray:
    """Sum of squared per-example last-layer gradients over the given rows.

    Additive over disjoint index sets by construction.
    """
    size = last_layer_slice(params).stop - last_layer_slice(params).start
    acc = np.zeros(size)
    for idx in indices:
        t, eps = _per_example_draw(seed, int(idx), schedule.T, cfg.input_dim)
        c = None if cond is None else int(cond[idx])
        g = last_layer_example_grad(cfg, params, schedule, x0[idx], c, t, eps)
        acc += g * g
    return acc


def fit_laplace(
    ckpt: Checkpoint,
    x0: np.ndarray,
    cond: np.ndarray | None = None,
    fraction: float = 1.0,
    prior_precision: float = 1.0,
    observation_noise: float = 1.0,
    seed: int = 0,
) -> LaplaceState:
    """Fit the last-layer Gaussian at the checkpoint's sampling weights.

    The curvature is the diagonal empirical Fisher: per-coordinate sums of
    squared per-example loss gradients over a random fraction of the data,
    one corruption draw per example.
    """
    if ckpt.objective != OBJECTIVE_EPSILON or ckpt.schedule is None:
        raise ConfigError("laplace fitting expects a noise-prediction checkpoint")
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction must lie in (0, 1]")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    n = x0.shape[0]
    n_fit = max(1, int(round(fraction * n))) if n > 0 else 0
    if n_fit == 0:
        raise ConfigError("empty laplace fit subset")
    if n_fit == n:
        indices = np.arange(n)
    else:
        gen = RngState(child_seed(seed, STREAM_FISHER, 1 << 32)).generator()
        indices = np.sort(gen.choice(n, size=n_fit, replace=False))

    params = ckpt.sampling_params
    fisher = fisher_diag_for_examples(
        ckpt.mlp, params, ckpt.schedule, x0, cond, indices, seed
    )
    if np.all(fisher == 0.0):
        raise NumericError("all-zero fisher diagonal: the final layer saw no signal")
    variance = observation_noise**2 / (fisher + prior_precision)
    mean = params.values[last_layer_slice(params)].copy()
    return LaplaceState(
        mean=mean,
        fisher_diag=fisher,
        prior_precision=prior_precision,
        observation_noise=observation_noise,
        posterior_variance=variance,
        source_hash=checkpoint_hash(ckpt),
    )


def sample_weights(
    posterior: PosteriorSpec,
    m: int | None = None,
    rng: RngState | None = None,
) -> ParamVector:
    """Draw one weight vector from the posterior.

    Ensembles return member ``m`` verbatim; the Laplace path adds scaled
    Gaussian noise to the last-layer coordinates of a copy of the base
    weights and leaves everything else bit-identical.
    """
    if posterior.kind == ENSEMBLE:
        if m is None or not 0 <= m < len(posterior.members):
            raise ConfigError(f"member index {m} out of range")
        return posterior.members[m].sampling_params.copy()

    if rng is None:
        raise ConfigError("laplace sampling needs an rng state")
    la = posterior.laplace
    base = posterior.base.sampling_params
    draw = rng.generator().standard_normal(la.mean.size)
    values = base.values.copy()
    values[last_layer_slice(base)] = la.mean + np.sqrt(la.posterior_variance) * draw
    return ParamVector(values, base.layout)


def draw_replicas(posterior: PosteriorSpec, m_count: int, seed: int) -> list[ParamVector]:
    """The fixed replica weight set reused across every scored seed."""
    if posterior.kind == ENSEMBLE:
        if m_count > len(posterior.members):
            raise ConfigError(
                f"requested {m_count} replicas from a {len(posterior.members)}-member ensemble"
            )
        return [sample_weights(posterior, m=i) for i in range(m_count)]
    return [
        sample_weights(posterior, rng=RngState(child_seed(seed, STREAM_WEIGHTS, i)))
        for i in range(m_count)
    ]


def train_ensemble(
    cfg: TrainConfig,
    x0: np.ndarray,
    cond: np.ndarray | None,
    member_count: int,
    base_seed: int,
    trace_dir: str | Path | None = None,
) -> PosteriorSpec:
    """Train ``member_count`` independently seeded models."""
    if member_count < 2:
        raise ConfigError("member_count must be >= 2")
    members = []
    for i in range(member_count):
        trace = None
        if trace_dir is not None:
            trace = Path(trace_dir) / f"loss_member_{i:03d}.csv"
        try:
            members.append(train(with_seed(cfg, base_seed + i), x0, cond, trace))
        except NumericError as exc:
            raise NumericError(f"ensemble member {i} failed: {exc}") from exc
    return PosteriorSpec(kind=ENSEMBLE, members=members)


def save_laplace(state: LaplaceState, path: str | Path) -> None:
    doc = {
        "format": LAPLACE_FORMAT,
        "version": FILE_VERSION,
        "layer": "out",
        "param_names": list(LAST_LAYER_PARAMS),
        "mean": state.mean.tolist(),
        "fisher_diag": state.fisher_diag.tolist(),
        "prior_precision": state.prior_precision,
        "observation_noise": state.observation_noise,
        "posterior_variance": state.posterior_variance.tolist(),
        "source_checkpoint_sha256": state.source_hash,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))


def load_laplace(path: str | Path, ckpt: Checkpoint) -> LaplaceState:
    """Load a Laplace file and bind it to its source checkpoint.

    A hash mismatch between the file and the checkpoint is a hard error.
    """
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != LAPLACE_FORMAT or doc.get("version") != FILE_VERSION:
        raise HashMismatchError(f"not a supported laplace file: {path}")
    state = LaplaceState(
        mean=np.array(doc["mean"]),
        fisher_diag=np.array(doc["fisher_diag"]),
        prior_precision=doc["prior_precision"],
        observation_noise=doc["observation_noise"],
        posterior_variance=np.array(doc["posterior_variance"]),
        source_hash=doc["source_checkpoint_sha256"],
    )
    actual = checkpoint_hash(ckpt)
    if state.source_hash != actual:
        raise HashMismatchError(
            f"laplace file was fitted for checkpoint {state.source_hash[:12]}..., "
            f"got {actual[:12]}..."
        )
    return state


def save_ensemble_manifest(paths: list[str], seeds: list[int], path: str | Path) -> None:
    doc = {
        "format": ENSEMBLE_FORMAT,
        "version": FILE_VERSION,
        "members": [{"path": p, "seed": s} for p, s in zip(paths, seeds)],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")))


def load_ensemble_from_manifest(path: str | Path) -> PosteriorSpec:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != ENSEMBLE_FORMAT or doc.get("version") != FILE_VERSION:
        raise HashMismatchError(f"not a supported ensemble manifest: {path}")
    root = Path(path).parent
    members = [load_checkpoint(root / m["path"]) for m in doc["members"]]
    return PosteriorSpec(kind=ENSEMBLE, members=members)
