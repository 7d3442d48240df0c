"""Per-seed generative uncertainty scoring.

For a fixed captured noise trajectory, the trained model produces one
sample while M posterior weight draws replay the identical trajectory into
M replica samples. Replica feature vectors are pooled into a single
diagonal Gaussian by moment matching; its differential entropy is the
uncertainty score for that seed. High entropy flags seeds on which the
posterior disagrees, which empirically tracks poor sample quality.

With M=1 the moment-matched variance degenerates to the observation-noise
floor, so single-replica scoring falls back to the squared feature distance
between the replica and the base sample. That distance fills the same
``entropy`` record field and CSV column; it is a ranking extension, not an
entropy.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, checkpoint_hash
from .diffusion import NfeMeter, SamplerSpec, SeedBundle, make_seed_bundle, sample_batch
from .errors import ConfigError, DimensionError, HashMismatchError, NumericError
from .nn import ParamVector
from .posterior import LAPLACE, PosteriorSpec, draw_replicas
from .rng import RngState

FEATURE_IDENTITY = "identity"
FEATURE_PROJECTION = "random-projection"
FEATURE_EMBEDDING = "embedding-file"

# Seed chunks are a fixed size so scoring output does not depend on the
# worker count.
SCORE_CHUNK = 1024


@dataclass
class FeatureMap:
    """Map from sample space to the space where variability is measured."""

    kind: str
    output_dim: int
    projection: np.ndarray | None = None
    table: dict[str, np.ndarray] | None = None

    @classmethod
    def identity(cls, dim: int) -> "FeatureMap":
        return cls(FEATURE_IDENTITY, dim)

    @classmethod
    def random_projection(cls, input_dim: int, output_dim: int, seed: int) -> "FeatureMap":
        """Rows are orthonormalized via QR of a seeded Gaussian matrix."""
        if output_dim > input_dim:
            raise ConfigError("projection output_dim cannot exceed input_dim")
        g = RngState(seed).generator().standard_normal((input_dim, output_dim))
        q, _ = np.linalg.qr(g)
        return cls(FEATURE_PROJECTION, output_dim, projection=q.T.copy())

    @classmethod
    def signed_permutation(cls, dim: int, seed: int) -> "FeatureMap":
        """Axis-aligned orthonormal map: shuffles coordinates and flips signs.

        The only orthonormal family under which the diagonal moment-matched
        entropy is exactly invariant.
        """
        gen = RngState(seed).generator()
        perm = gen.permutation(dim)
        signs = gen.integers(0, 2, size=dim) * 2 - 1
        mat = np.zeros((dim, dim))
        mat[np.arange(dim), perm] = signs
        return cls(FEATURE_PROJECTION, dim, projection=mat)

    @classmethod
    def from_embedding_csv(cls, path: str | Path) -> "FeatureMap":
        """Adapter for externally computed embeddings, keyed by sample id.

        Ids follow ``<seed_id>`` for the base sample and ``<seed_id>/<m>``
        for replica ``m`` (1-based).
        """
        table: dict[str, np.ndarray] = {}
        dim = None
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if not header or header[0] != "sample_id":
                raise ConfigError(f"embedding file {path} must start with sample_id column")
            for row in reader:
                vec = np.array([float(v) for v in row[1:]])
                if dim is None:
                    dim = vec.size
                elif vec.size != dim:
                    raise ConfigError(f"ragged embedding row for id {row[0]!r}")
                table[row[0]] = vec
        if not table:
            raise ConfigError(f"embedding file {path} has no rows")
        return cls(FEATURE_EMBEDDING, dim, table=table)

    def apply(self, x: np.ndarray, sample_id: str | None = None) -> np.ndarray:
        if self.kind == FEATURE_IDENTITY:
            x = np.asarray(x, dtype=np.float64)
            if x.shape[-1] != self.output_dim:
                raise DimensionError("identity features require matching dims")
            return x
        if self.kind == FEATURE_PROJECTION:
            return np.asarray(x) @ self.projection.T
        if sample_id is None:
            raise ConfigError("embedding-file features need a sample id")
        try:
            return self.table[sample_id]
        except KeyError:
            raise ConfigError(f"no embedding for sample id {sample_id!r}") from None


@dataclass
class PredictiveGaussian:
    """Moment-matched diagonal Gaussian over feature space."""

    mean: np.ndarray
    variance_diag: np.ndarray
    sem_noise: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance_diag = np.asarray(self.variance_diag, dtype=np.float64)
        if self.sem_noise <= 0:
            raise NumericError("observation noise must be positive")
        if self.mean.shape != self.variance_diag.shape:
            raise DimensionError("mean and variance must share a shape")
        if not np.all(np.isfinite(self.variance_diag)) or np.any(
            self.variance_diag < self.sem_noise
        ):
            raise NumericError("variance must be finite and at least the noise floor")


def moment_match(features: np.ndarray, sem_noise: float) -> PredictiveGaussian:
    """Collapse M feature vectors into one Gaussian.

    Population variance per coordinate (mean of squares minus squared mean)
    plus the observation-noise floor.
    """
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[0] < 1:
        raise ConfigError("moment matching needs at least one feature vector")
    mean = features.mean(axis=0)
    raw = np.maximum(np.mean(features**2, axis=0) - mean**2, 0.0)
    return PredictiveGaussian(mean, raw + sem_noise, sem_noise)


def gaussian_entropy(g: PredictiveGaussian) -> float:
    """Differential entropy of a diagonal Gaussian:
    0.5 * sum_i log(2*pi*e*v_i). May be negative for small variances."""
    v = g.variance_diag
    if np.any(v <= 0):
        raise NumericError("entropy of a non-positive variance")
    return float(0.5 * np.sum(np.log(2.0 * math.pi * math.e * v)))


def entropy_floor(dim: int, sem_noise: float) -> float:
    """Entropy when every replica coincides: the observation-noise floor."""
    return 0.5 * dim * math.log(2.0 * math.pi * math.e * sem_noise)


@dataclass
class UncertaintyRecord:
    """Self-contained scoring result for one seed."""

    seed_id: int
    cond: int | None
    sample: np.ndarray
    replicas: np.ndarray
    features: np.ndarray
    entropy: float
    replica_nfe: int

    def __post_init__(self):
        if not np.isfinite(self.entropy):
            raise NumericError(f"non-finite entropy for seed {self.seed_id}")


def pixelwise_uncertainty(replicas: np.ndarray, sem_noise: float) -> np.ndarray:
    """Per-dimension moment-matched variance of raw replica samples,
    before any entropy reduction."""
    return moment_match(replicas, sem_noise).variance_diag


def aggregate_by_condition(records: list[UncertaintyRecord]) -> dict[int | None, float]:
    """Mean entropy per condition id."""
    sums: dict[int | None, list[float]] = {}
    for rec in records:
        sums.setdefault(rec.cond, []).append(rec.entropy)
    return {cond: float(np.mean(vals)) for cond, vals in sums.items()}


def _check_posterior(ckpt: Checkpoint, posterior: PosteriorSpec) -> None:
    if posterior.kind == LAPLACE:
        actual = checkpoint_hash(ckpt)
        if posterior.laplace.source_hash != actual:
            raise HashMismatchError(
                "posterior was fitted for a different checkpoint "
                f"({posterior.laplace.source_hash[:12]}... vs {actual[:12]}...)"
            )


def _feature_rows(
    fmap: FeatureMap, xs: np.ndarray, seed_ids: np.ndarray, suffix: str | None
) -> np.ndarray:
    if fmap.kind != FEATURE_EMBEDDING:
        return fmap.apply(xs)
    rows = []
    for sid, x in zip(seed_ids, xs):
        key = str(int(sid)) if suffix is None else f"{int(sid)}/{suffix}"
        rows.append(fmap.apply(x, sample_id=key))
    return np.stack(rows)


def score_batch(
    seed_ids: list[int] | np.ndarray,
    ckpt: Checkpoint,
    posterior: PosteriorSpec,
    base_spec: SamplerSpec,
    score_spec: SamplerSpec,
    feature_map: FeatureMap,
    m_count: int,
    sem_noise: float,
    sample_seed: int,
    conds: np.ndarray | None = None,
    include_base: bool = False,
    m1_distance: bool = True,
    threads: int = 1,
    meter: NfeMeter | None = None,
) -> list[UncertaintyRecord]:
    """Score a batch of seeds with one shared replica weight set.

    Seeds are processed in canonical ascending order in fixed-size chunks,
    so the output is independent of input order and worker count. Records
    come back sorted by seed id.
    """
    if m_count < 1:
        raise ConfigError("m_count must be >= 1")
    _check_posterior(ckpt, posterior)

    order = np.argsort(np.asarray(seed_ids, dtype=np.int64), kind="stable")
    sids = np.asarray(seed_ids, dtype=np.int64)[order]
    if np.any(np.diff(sids) == 0):
        raise ConfigError("seed ids must be unique")
    conds_sorted = None if conds is None else np.asarray(conds, dtype=np.int64)[order]

    replicas = draw_replicas(posterior, m_count, sample_seed)
    meter = meter if meter is not None else NfeMeter()

    chunks = [
        (sids[i : i + SCORE_CHUNK],
         None if conds_sorted is None else conds_sorted[i : i + SCORE_CHUNK])
        for i in range(0, sids.size, SCORE_CHUNK)
    ]

    def run_chunk(args):
        chunk_ids, chunk_conds = args
        return _score_chunk(
            chunk_ids, chunk_conds, ckpt, replicas, base_spec, score_spec,
            feature_map, m_count, sem_noise, sample_seed, include_base,
            m1_distance, meter,
        )

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_chunk, chunks))
    else:
        results = [run_chunk(c) for c in chunks]

    records: list[UncertaintyRecord] = []
    for part in results:
        records.extend(part)
    return records


def _score_chunk(
    chunk_ids: np.ndarray,
    chunk_conds: np.ndarray | None,
    ckpt: Checkpoint,
    replica_weights: list[ParamVector],
    base_spec: SamplerSpec,
    score_spec: SamplerSpec,
    feature_map: FeatureMap,
    m_count: int,
    sem_noise: float,
    sample_seed: int,
    include_base: bool,
    m1_distance: bool,
    meter: NfeMeter,
) -> list[UncertaintyRecord]:
    dim = ckpt.mlp.input_dim
    base_bundles = [
        make_seed_bundle(sample_seed, int(s), dim, base_spec, noise_stream=0)
        for s in chunk_ids
    ]
    score_bundles = [
        make_seed_bundle(sample_seed, int(s), dim, score_spec, noise_stream=1)
        for s in chunk_ids
    ]

    base_x = sample_batch(
        ckpt.mlp, ckpt.sampling_params, ckpt.schedule, base_spec,
        base_bundles, chunk_conds, meter,
    )
    replica_x = np.stack([
        sample_batch(
            ckpt.mlp, weights, ckpt.schedule, score_spec,
            score_bundles, chunk_conds, meter,
        )
        for weights in replica_weights
    ], axis=1)  # (n, M, dim)

    e0 = _feature_rows(feature_map, base_x, chunk_ids, None)
    feats = np.stack([
        _feature_rows(feature_map, replica_x[:, m, :], chunk_ids, str(m + 1))
        for m in range(m_count)
    ], axis=1)  # (n, M, f)

    per_seed_nfe = m_count * score_spec.steps
    out = []
    for j, sid in enumerate(chunk_ids):
        stat_rows = feats[j]
        if include_base:
            stat_rows = np.vstack([e0[j][None, :], stat_rows])
        if m_count == 1 and m1_distance:
            score = float(np.sum((feats[j, 0] - e0[j]) ** 2))
        else:
            score = gaussian_entropy(moment_match(stat_rows, sem_noise))
        out.append(
            UncertaintyRecord(
                seed_id=int(sid),
                cond=None if chunk_conds is None else int(chunk_conds[j]),
                sample=base_x[j],
                replicas=replica_x[j],
                features=np.vstack([e0[j][None, :], feats[j]]),
                entropy=score,
                replica_nfe=per_seed_nfe,
            )
        )
    return out


def score_seed(
    bundle_seed_id: int,
    ckpt: Checkpoint,
    posterior: PosteriorSpec,
    base_spec: SamplerSpec,
    score_spec: SamplerSpec,
    feature_map: FeatureMap,
    m_count: int,
    sem_noise: float,
    sample_seed: int,
    cond: int | None = None,
    include_base: bool = False,
    m1_distance: bool = True,
    meter: NfeMeter | None = None,
) -> UncertaintyRecord:
    """Score a single seed; equivalent to a batch of one."""
    conds = None if cond is None else np.array([cond])
    records = score_batch(
        [bundle_seed_id], ckpt, posterior, base_spec, score_spec, feature_map,
        m_count, sem_noise, sample_seed, conds, include_base, m1_distance,
        meter=meter,
    )
    return records[0]


def write_records_csv(records: list[UncertaintyRecord], path: str | Path) -> None:
    """Canonical score table: ascending seed id, shortest-round-trip floats."""
    ordered = sorted(records, key=lambda r: r.seed_id)
    with open(path, "w", newline="") as fh:
        fh.write("seed_id,cond,entropy\n")
        for rec in ordered:
            cond = "" if rec.cond is None else str(rec.cond)
            fh.write(f"{rec.seed_id},{cond},{repr(rec.entropy)}\n")


def read_records_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (seed_ids, conds, entropies); cond is -1 where absent."""
    sids, conds, ents = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["seed_id", "cond", "entropy"]:
            raise ConfigError(f"unexpected records header {header} in {path}")
        for row in reader:
            sids.append(int(row[0]))
            conds.append(-1 if row[1] == "" else int(row[1]))
            ents.append(float(row[2]))
    return np.array(sids, dtype=np.int64), np.array(conds, dtype=np.int64), np.array(ents)


def write_records_sidecar(records: list[UncertaintyRecord], path: str | Path) -> None:
    """Binary sidecar with samples, replicas, and feature vectors."""
    ordered = sorted(records, key=lambda r: r.seed_id)
    np.savez_compressed(
        path,
        seed_ids=np.array([r.seed_id for r in ordered], dtype=np.int64),
        conds=np.array([-1 if r.cond is None else r.cond for r in ordered], dtype=np.int64),
        samples=np.stack([r.sample for r in ordered]),
        replicas=np.stack([r.replicas for r in ordered]),
        features=np.stack([r.features for r in ordered]),
        entropy=np.array([r.entropy for r in ordered]),
        replica_nfe=np.array([r.replica_nfe for r in ordered], dtype=np.int64),
    )


def read_records_sidecar(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path) as data:
        return {name: data[name] for name in data.files}
