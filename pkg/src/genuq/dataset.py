"""Synthetic mixture dataset generation and CSV I/O.

The toy dataset is a grid of isotropic Gaussian modes in 2-D; each sample
carries its mode index in the ``cond`` column. Files are written with
shortest-round-trip floats so a fixed seed yields byte-identical output.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .diffusion import STREAM_DATASET, child_seed
from .errors import ConfigError
from .metrics import ModeSpec
from .rng import RngState


def make_mode_dataset(
    modes: ModeSpec, n: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Draw n points: uniform mode choice, isotropic Gaussian around it."""
    if n < 0:
        raise ConfigError("n must be >= 0")
    dim = modes.centers.shape[1]
    if n == 0:
        return np.zeros((0, dim)), np.zeros(0, dtype=np.int64)
    gen = RngState(child_seed(seed, STREAM_DATASET)).generator()
    labels = gen.integers(0, modes.count, size=n)
    noise = gen.standard_normal((n, dim))
    x = modes.centers[labels] + modes.mode_std * noise
    return x, labels.astype(np.int64)


def write_dataset_csv(path: str | Path, x: np.ndarray, labels: np.ndarray) -> None:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError("dataset array must be (n, dim), even when n=0")
    header = [f"x{i}" for i in range(x.shape[1])] + ["cond"]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row, label in zip(x, labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(label)}\n")


def read_dataset_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-1] != "cond" or not all(h.startswith("x") for h in header[:-1]):
            raise ConfigError(f"unexpected dataset header {header} in {path}")
        xs, labels = [], []
        for row in reader:
            xs.append([float(v) for v in row[:-1]])
            labels.append(int(row[-1]))
    dim = len(header) - 1
    if not xs:
        return np.zeros((0, dim)), np.zeros(0, dtype=np.int64)
    return np.array(xs), np.array(labels, dtype=np.int64)
