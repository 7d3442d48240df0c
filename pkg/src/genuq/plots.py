"""Figure emission. Every figure is written as SVG next to a CSV twin
holding the exact plotted numbers."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import GenUqError  # noqa: E402


def _write_points_csv(path: Path, points: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(f"x{i}" for i in range(points.shape[1])) + "\n")
        for row in points:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def three_panel_scatter(
    data: np.ndarray,
    generated: np.ndarray,
    kept: np.ndarray,
    out_dir: str | Path,
    stem: str = "scatter",
) -> list[Path]:
    """Training data, raw generations, and the filtered subset side by side."""
    if len(generated) == 0 or len(kept) == 0:
        raise GenUqError("nothing to plot: empty generated or filtered set")
    out_dir = Path(out_dir)
    fig, axes = plt.subplots(1, 3, figsize=(13, 4.2), sharex=True, sharey=True)
    panels = [(data, "training data"), (generated, "generated"), (kept, "filtered")]
    for ax, (points, title) in zip(axes, panels):
        ax.scatter(points[:, 0], points[:, 1], s=2, alpha=0.4, linewidths=0)
        ax.set_title(title)
        ax.set_aspect("equal")
    fig.tight_layout()
    svg = out_dir / f"{stem}.svg"
    fig.savefig(svg)
    plt.close(fig)
    written = [svg]
    for points, name in [(data, "data"), (generated, "generated"), (kept, "kept")]:
        csv_path = out_dir / f"{stem}_{name}.csv"
        _write_points_csv(csv_path, np.atleast_2d(points))
        written.append(csv_path)
    return written


def metric_curves(
    rows: list[dict],
    out_dir: str | Path,
    stem: str = "curves",
) -> list[Path]:
    """Metric-vs-n curves for filtered and random subsets.

    ``rows`` carry score, n, subset, and the scalar metrics; the CSV twin is
    the authoritative record and matches the report files exactly.
    """
    if not rows:
        raise GenUqError("nothing to plot: no evaluation rows")
    out_dir = Path(out_dir)
    csv_path = out_dir / f"{stem}.csv"
    fields = ["score", "n", "subset", "fid", "precision", "recall", "hallucination_rate"]
    with open(csv_path, "w", newline="") as fh:
        fh.write(",".join(fields) + "\n")
        for row in rows:
            fh.write(
                f"{row['score']},{row['n']},{row['subset']},"
                f"{repr(row['fid'])},{repr(row['precision'])},"
                f"{repr(row['recall'])},{repr(row['hallucination_rate'])}\n"
            )

    metrics = ["fid", "precision", "recall", "hallucination_rate"]
    fig, axes = plt.subplots(1, len(metrics), figsize=(4.2 * len(metrics), 3.6))
    scores = sorted({r["score"] for r in rows})
    for ax, metric in zip(axes, metrics):
        for score in scores:
            for subset, style in [("kept", "-o"), ("random", "--s")]:
                pts = sorted(
                    (r["n"], r[metric]) for r in rows
                    if r["score"] == score and r["subset"].startswith(subset)
                )
                if pts:
                    ax.plot([p[0] for p in pts], [p[1] for p in pts], style,
                            label=f"{score} {subset}", markersize=3)
        ax.set_xlabel("kept samples n")
        ax.set_title(metric)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    svg = out_dir / f"{stem}.svg"
    fig.savefig(svg)
    plt.close(fig)
    return [svg, csv_path]


def correlation_heatmap(
    names: list[str],
    matrix: np.ndarray,
    out_dir: str | Path,
    stem: str = "spearman",
) -> list[Path]:
    if not names:
        raise GenUqError("nothing to plot: empty correlation matrix")
    out_dir = Path(out_dir)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        fh.write("," + ",".join(names) + "\n")
        for name, row in zip(names, matrix):
            fh.write(name + "," + ",".join(repr(float(v)) for v in row) + "\n")

    fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 1.2 * len(names) + 1.5))
    im = ax.imshow(matrix, vmin=-1.0, vmax=1.0, cmap="coolwarm")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
    ax.set_yticks(range(len(names)), names)
    for i in range(len(names)):
        for j in range(len(names)):
            ax.text(j, i, f"{matrix[i, j]:.2f}", ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    svg = out_dir / f"{stem}.svg"
    fig.savefig(svg)
    plt.close(fig)
    return [svg, csv_path]
