"""Deterministic synthetic mixture data and headerless-CSV feature ingestion."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, ParseError
from .jsonio import format_float, read_json, write_json
from .rng import Xoshiro256StarStar


@dataclass
class Dataset:
    x: np.ndarray
    true_cluster: np.ndarray  # -1 where ground truth is unknown
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


def _cluster_sizes(n: int, c: int) -> list[int]:
    base, extra = divmod(n, c)
    return [base + (1 if i < extra else 0) for i in range(c)]


def gen_mixture(
    n: int, d: int, c: int, separation: float, noise_sigma: float, seed: int
) -> Dataset:
    """Balanced c-cluster Gaussian mixture with seeded, fully specified draws.

    Cluster means sit on a centered simplex-like frame in the first c
    coordinates, scaled so pairwise mean distance is separation * noise_sigma
    (separation alone when noise_sigma is zero). Samples are drawn cluster by
    cluster in index order, d gaussians per sample, so the stream layout is
    part of the format.
    """
    if c < 2 or n < c:
        raise InvalidInput(f"need c >= 2 and n >= c, got n={n}, c={c}")
    if d < c:
        raise InvalidInput(f"the mean frame needs d >= c, got d={d}, c={c}")
    if separation < 0 or noise_sigma < 0:
        raise InvalidInput("separation and noise_sigma must be nonnegative")
    scale = separation * (noise_sigma if noise_sigma > 0 else 1.0) / math.sqrt(2.0)
    means = np.zeros((c, d), dtype=np.float64)
    for i in range(c):
        means[i, i] = scale
    means -= means.mean(axis=0, keepdims=True)

    rng = Xoshiro256StarStar(seed)
    sizes = _cluster_sizes(n, c)
    x = np.empty((n, d), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    row = 0
    for ci, size in enumerate(sizes):
        for _ in range(size):
            x[row] = means[ci] + noise_sigma * rng.gaussians(d)
            labels[row] = ci
            row += 1
    meta = {
        "n": n,
        "d": d,
        "c": c,
        "separation": float(separation),
        "noise_sigma": float(noise_sigma),
        "seed": seed,
    }
    return Dataset(x=x, true_cluster=labels, meta=meta)


def true_means(meta: dict) -> np.ndarray:
    """Recompute the generator's cluster means from a meta sidecar."""
    c, d = meta["c"], meta["d"]
    sigma = meta["noise_sigma"]
    scale = meta["separation"] * (sigma if sigma > 0 else 1.0) / math.sqrt(2.0)
    means = np.zeros((c, d), dtype=np.float64)
    for i in range(c):
        means[i, i] = scale
    means -= means.mean(axis=0, keepdims=True)
    return means


def save_csv(path, x: np.ndarray) -> None:
    """Headerless CSV, 17 significant digits per value."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(x, dtype=np.float64):
            fh.write(",".join(format_float(v) for v in row))
            fh.write("\n")


def load_features(path) -> Dataset:
    """Read a headerless CSV of reals; ragged or non-numeric rows fail loudly."""
    rows: list[list[float]] = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            try:
                row = [float(f) for f in fields]
            except ValueError as exc:
                raise ParseError(f"{path}: non-numeric value at line {lineno}") from exc
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(
                    f"{path}: ragged row at line {lineno} ({len(row)} fields, expected {width})"
                )
            rows.append(row)
    if not rows:
        raise InvalidInput(f"{path}: empty feature file")
    x = np.asarray(rows, dtype=np.float64)
    return Dataset(x=x, true_cluster=np.full(x.shape[0], -1, dtype=np.int64), meta={})


def meta_path(csv_path: str) -> str:
    return str(csv_path) + ".meta.json"


def save_dataset(csv_path, dataset: Dataset) -> None:
    save_csv(csv_path, dataset.x)
    write_json(meta_path(csv_path), dataset.meta)


def load_dataset(csv_path) -> Dataset:
    ds = load_features(csv_path)
    try:
        ds.meta = read_json(meta_path(csv_path))
    except OSError:
        ds.meta = {}
    return ds
