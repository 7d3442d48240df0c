"""Distribution- and sample-level quality metrics.

Fréchet distance between Gaussian moment fits, k-NN manifold precision and
recall, per-sample realism and rarity scores, Spearman rank correlation,
rank-sum score combination, and the toy-specific mode coverage and
hallucination statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, NumericError
from .rng import RngState

# Ranking direction per score: "asc" keeps the lowest values, "desc" the
# highest. Entropy and rarity prefer low, realism prefers high.
SCORE_DIRECTIONS = {"entropy": "asc", "realism": "desc", "rarity": "asc"}

DISTANCE_FLOOR = 1e-12
COV_EIG_FLOOR = 1e-10
COV_REGULARIZER = 1e-6


@dataclass(frozen=True)
class ModeSpec:
    """Ground-truth mixture geometry of the synthetic dataset."""

    centers: np.ndarray
    mode_std: float
    hallucination_radius: float = 3.0

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        object.__setattr__(self, "centers", centers)
        if self.mode_std <= 0:
            raise ConfigError("mode_std must be positive")
        if self.hallucination_radius < 1.0:
            raise ConfigError("hallucination_radius must be >= 1 (units of mode_std)")
        diffs = centers[:, None, :] - centers[None, :, :]
        dist = np.sqrt((diffs**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if np.any(dist == 0.0):
            raise ConfigError("mode centers must be pairwise distinct")

    @classmethod
    def grid(cls, side: int = 5, span: float = 2.0, mode_std: float = 0.05,
             hallucination_radius: float = 3.0) -> "ModeSpec":
        axis = np.linspace(-span, span, side)
        xs, ys = np.meshgrid(axis, axis, indexing="ij")
        centers = np.stack([xs.ravel(), ys.ravel()], axis=1)
        return cls(centers, mode_std, hallucination_radius)

    @property
    def count(self) -> int:
        return self.centers.shape[0]


def pairwise_distances(a: np.ndarray, b: np.ndarray, block: int = 4096) -> np.ndarray:
    """Euclidean distance matrix computed in row blocks."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    out = np.empty((a.shape[0], b.shape[0]))
    b_sq = (b**2).sum(axis=1)
    for start in range(0, a.shape[0], block):
        chunk = a[start : start + block]
        sq = (chunk**2).sum(axis=1)[:, None] + b_sq[None, :] - 2.0 * chunk @ b.T
        out[start : start + block] = np.sqrt(np.maximum(sq, 0.0))
    return out


@dataclass
class ManifoldIndex:
    """Reference points with their k-th nearest-neighbour radii."""

    points: np.ndarray
    k: int
    radii: np.ndarray


def build_manifold(points: np.ndarray, k: int = 3) -> ManifoldIndex:
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    if k >= n:
        raise ConfigError(f"k={k} must be smaller than the reference size {n}")
    dist = pairwise_distances(points, points)
    np.fill_diagonal(dist, np.inf)
    radii = np.sort(dist, axis=1)[:, k - 1]
    return ManifoldIndex(points, k, radii)


def in_manifold(x: np.ndarray, index: ManifoldIndex) -> np.ndarray:
    """Membership mask: covered by at least one reference ball."""
    dist = pairwise_distances(np.atleast_2d(x), index.points)
    return np.any(dist <= index.radii[None, :], axis=1)


def precision_recall(
    generated: np.ndarray, reference: np.ndarray, k: int = 3
) -> tuple[float, float]:
    """Fraction of generated points inside the reference manifold, and of
    reference points inside the generated manifold."""
    ref_index = build_manifold(reference, k)
    gen_index = build_manifold(generated, k)
    precision = float(np.mean(in_manifold(generated, ref_index)))
    recall = float(np.mean(in_manifold(reference, gen_index)))
    return precision, recall


def realism_scores(x: np.ndarray, index: ManifoldIndex) -> np.ndarray:
    """Best ratio of reference radius to distance; > 1 inside the manifold.

    Distances are floored to avoid the coincident-point singularity.
    """
    dist = np.maximum(pairwise_distances(np.atleast_2d(x), index.points), DISTANCE_FLOOR)
    return np.max(index.radii[None, :] / dist, axis=1)


def realism_score(x: np.ndarray, index: ManifoldIndex) -> float:
    return float(realism_scores(np.asarray(x)[None, :], index)[0])


def rarity_scores(x: np.ndarray, index: ManifoldIndex) -> np.ndarray:
    """Smallest covering-ball radius; +inf for points outside every ball."""
    dist = pairwise_distances(np.atleast_2d(x), index.points)
    covered = dist <= index.radii[None, :]
    radii = np.where(covered, index.radii[None, :], np.inf)
    return np.min(radii, axis=1)


def rarity_score(x: np.ndarray, index: ManifoldIndex) -> float:
    return float(rarity_scores(np.asarray(x)[None, :], index)[0])


def _regularized_cov(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    eigvals = np.linalg.eigvalsh((cov + cov.T) / 2.0)
    if eigvals.min() < COV_EIG_FLOOR:
        cov = cov + COV_REGULARIZER * np.eye(cov.shape[0])
    return mu, cov


def frechet_from_moments(
    mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray
) -> float:
    """Squared mean gap plus the Bures covariance term, with the matrix
    square root taken through eigendecompositions of symmetrized products."""
    mu_a = np.asarray(mu_a, dtype=np.float64).ravel()
    mu_b = np.asarray(mu_b, dtype=np.float64).ravel()
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))

    vals_a, vecs_a = np.linalg.eigh((cov_a + cov_a.T) / 2.0)
    sqrt_a = (vecs_a * np.sqrt(np.maximum(vals_a, 0.0))) @ vecs_a.T
    inner = sqrt_a @ cov_b @ sqrt_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    scale = max(float(np.abs(vals).max()), 1.0)
    if vals.min() < -1e-8 * scale:
        raise NumericError(
            f"product covariance is not PSD after regularization "
            f"(min eigenvalue {vals.min():.3g})"
        )
    tr_sqrt = float(np.sum(np.sqrt(np.maximum(vals, 0.0))))
    gap = float(((mu_a - mu_b) ** 2).sum())
    value = gap + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * tr_sqrt
    return max(value, 0.0)


def frechet_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits of two feature sets."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ConfigError("each set needs at least 2 samples for a covariance")
    mu_a, cov_a = _regularized_cov(a)
    mu_b, cov_b = _regularized_cov(b)
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b)


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their group average."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    sx = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(a: np.ndarray, b: np.ndarray) -> float:
    """Rank correlation: Pearson correlation of average-tie ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size or a.size < 2:
        raise ConfigError("need two equal-length arrays of size >= 2")
    ra, rb = average_ranks(a), average_ranks(b)
    ra = ra - ra.mean()
    rb = rb - rb.mean()
    denom = np.sqrt((ra**2).sum() * (rb**2).sum())
    if denom == 0.0:
        return 0.0
    return float((ra * rb).sum() / denom)


def spearman_matrix(scores: dict[str, np.ndarray]) -> tuple[list[str], np.ndarray]:
    names = list(scores)
    mat = np.eye(len(names))
    for i, ni in enumerate(names):
        for j in range(i + 1, len(names)):
            rho = spearman(scores[ni], scores[names[j]])
            mat[i, j] = mat[j, i] = rho
    return names, mat


def _best_first_ranks(values: np.ndarray, direction: str) -> np.ndarray:
    if direction not in ("asc", "desc"):
        raise ConfigError(f"unknown direction {direction!r}")
    return average_ranks(values if direction == "asc" else -values)


def combine_ranks(
    scores: dict[str, np.ndarray],
    directions: dict[str, str],
    seed_ids: np.ndarray,
) -> np.ndarray:
    """Sum per-score best-first ranks and re-rank; ties break by seed id.

    Returns seed ids ordered best-first. Invariant under strictly monotone
    transforms of any input score.
    """
    seed_ids = np.asarray(seed_ids, dtype=np.int64)
    total = np.zeros(seed_ids.size)
    for name, values in scores.items():
        values = np.asarray(values, dtype=np.float64)
        if values.size != seed_ids.size:
            raise ConfigError(f"score {name!r} length mismatch")
        total += _best_first_ranks(values, directions[name])
    order = np.lexsort((seed_ids, total))
    return seed_ids[order]


def mode_stats(samples: np.ndarray, modes: ModeSpec) -> tuple[np.ndarray, float]:
    """Coverage over modes and the fraction of hallucinated samples.

    A sample is hallucinated when its nearest center is farther than
    hallucination_radius * mode_std; coverage is the share of each mode
    among the non-hallucinated samples.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    dist = pairwise_distances(samples, modes.centers)
    nearest = np.argmin(dist, axis=1)
    nearest_dist = dist[np.arange(dist.shape[0]), nearest]
    hallucinated = nearest_dist > modes.hallucination_radius * modes.mode_std
    rate = float(np.mean(hallucinated)) if samples.shape[0] else 0.0
    kept = nearest[~hallucinated]
    counts = np.bincount(kept, minlength=modes.count).astype(np.float64)
    coverage = counts / max(kept.size, 1)
    return coverage, rate


def select_best(
    seed_ids: np.ndarray, values: np.ndarray, direction: str, keep: int
) -> np.ndarray:
    """Stable best-first selection; ties break by seed id. Returns the kept
    ids in ascending order."""
    seed_ids = np.asarray(seed_ids, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if not 1 <= keep <= seed_ids.size:
        raise ConfigError(f"keep={keep} outside [1, {seed_ids.size}]")
    key = values if direction == "asc" else -values
    order = np.lexsort((seed_ids, key))
    return np.sort(seed_ids[order[:keep]])


def random_subset(seed_ids: np.ndarray, keep: int, seed: int) -> np.ndarray:
    """Uniform same-size baseline subset, ascending seed ids."""
    seed_ids = np.asarray(seed_ids, dtype=np.int64)
    if not 1 <= keep <= seed_ids.size:
        raise ConfigError(f"keep={keep} outside [1, {seed_ids.size}]")
    gen = RngState(seed).generator()
    chosen = gen.choice(seed_ids.size, size=keep, replace=False)
    return np.sort(seed_ids[chosen])


def filter_ids(
    seed_ids: np.ndarray,
    values: np.ndarray,
    direction: str,
    keep: int,
    baseline_seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Best-first selection paired with a uniform random baseline of the
    same size, for paired evaluation."""
    kept = select_best(seed_ids, values, direction, keep)
    baseline = random_subset(seed_ids, keep, baseline_seed)
    return kept, baseline


@dataclass
class MetricReport:
    """Evaluation summary for one sample subset."""

    n_samples: int
    fid: float
    precision: float
    recall: float
    hallucination_rate: float
    mode_coverage: np.ndarray
    seed_ids: np.ndarray
    realism: np.ndarray
    rarity: np.ndarray
    spearman_names: list[str] = field(default_factory=list)
    spearman_matrix: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


def evaluate_subset(
    samples: np.ndarray,
    seed_ids: np.ndarray,
    reference: np.ndarray,
    modes: ModeSpec,
    scores: dict[str, np.ndarray] | None = None,
    k: int = 3,
) -> MetricReport:
    """Compute the full metric battery for one subset against a reference."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    seed_ids = np.asarray(seed_ids, dtype=np.int64)
    index = build_manifold(reference, k)
    precision, recall = precision_recall(samples, reference, k)
    coverage, rate = mode_stats(samples, modes)
    realism = realism_scores(samples, index)
    rarity = rarity_scores(samples, index)
    corr_scores = {"realism": realism, "rarity": rarity}
    if scores:
        corr_scores = {**scores, **corr_scores}
    names, mat = spearman_matrix(corr_scores)
    return MetricReport(
        n_samples=samples.shape[0],
        fid=frechet_distance(samples, reference),
        precision=precision,
        recall=recall,
        hallucination_rate=rate,
        mode_coverage=coverage,
        seed_ids=seed_ids,
        realism=realism,
        rarity=rarity,
        spearman_names=names,
        spearman_matrix=mat,
    )


REPORT_HEADER = "genuq-metric-report v1"


def write_report(report: MetricReport, path: str | Path) -> None:
    """Key-value lines followed by CSV blocks for the array fields."""
    lines = [REPORT_HEADER]
    lines.append(f"n_samples={report.n_samples}")
    lines.append(f"fid={repr(report.fid)}")
    lines.append(f"precision={repr(report.precision)}")
    lines.append(f"recall={repr(report.recall)}")
    lines.append(f"hallucination_rate={repr(report.hallucination_rate)}")
    lines.append("[mode_coverage]")
    lines.append("mode,coverage")
    for i, c in enumerate(report.mode_coverage):
        lines.append(f"{i},{repr(float(c))}")
    lines.append("[realism]")
    lines.append("seed_id,value")
    for sid, v in zip(report.seed_ids, report.realism):
        lines.append(f"{sid},{repr(float(v))}")
    lines.append("[rarity]")
    lines.append("seed_id,value")
    for sid, v in zip(report.seed_ids, report.rarity):
        lines.append(f"{sid},{repr(float(v))}")
    lines.append("[spearman]")
    lines.append("," + ",".join(report.spearman_names))
    for i, name in enumerate(report.spearman_names):
        row = ",".join(repr(float(v)) for v in report.spearman_matrix[i])
        lines.append(f"{name},{row}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path: str | Path) -> MetricReport:
    text = Path(path).read_text().splitlines()
    if not text or text[0] != REPORT_HEADER:
        raise ConfigError(f"{path} is not a metric report")
    scalars: dict[str, float] = {}
    sections: dict[str, list[list[str]]] = {}
    current: str | None = None
    for line in text[1:]:
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
        elif current is None:
            key, value = line.split("=", 1)
            scalars[key] = float(value)
        else:
            sections[current].append(line.split(","))

    coverage = np.array([float(r[1]) for r in sections["mode_coverage"][1:]])
    realism_rows = sections["realism"][1:]
    rarity_rows = sections["rarity"][1:]
    seed_ids = np.array([int(r[0]) for r in realism_rows], dtype=np.int64)
    names = sections["spearman"][0][1:]
    mat = np.array([[float(v) for v in row[1:]] for row in sections["spearman"][1:]])
    return MetricReport(
        n_samples=int(scalars["n_samples"]),
        fid=scalars["fid"],
        precision=scalars["precision"],
        recall=scalars["recall"],
        hallucination_rate=scalars["hallucination_rate"],
        mode_coverage=coverage,
        seed_ids=seed_ids,
        realism=np.array([float(r[1]) for r in realism_rows]),
        rarity=np.array([float(r[1]) for r in rarity_rows]),
        spearman_names=names,
        spearman_matrix=mat,
    )
