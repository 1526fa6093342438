"""Initial segment labels from k-means over segment features, plus label files."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

_CHUNK = 2048


class SegmentLabel(NamedTuple):
    frame_id: str
    segment_id: int
    y: int  # 0 = background, 1..C = cluster


@dataclass
class KMeansModel:
    centroids: np.ndarray  # (C', D), C' <= C
    C: int
    objective_trace: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_norms(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, x)


def assign(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid (lowest index on ties) and its squared distance, chunked over rows."""
    n = len(x)
    labels = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    c_norm = _sq_norms(centroids)
    for a in range(0, n, _CHUNK):
        xb = x[a : a + _CHUNK]
        d = _sq_norms(xb)[:, None] - 2.0 * xb @ centroids.T + c_norm[None, :]
        np.maximum(d, 0.0, out=d)
        k = np.argmin(d, axis=1)
        labels[a : a + _CHUNK] = k
        dist[a : a + _CHUNK] = d[np.arange(len(xb)), k]
    return labels, dist


def kmeans_plus_plus(x: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    """D^2 seeding; stops early once every point coincides with a chosen seed."""
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = np.maximum(_sq_norms(x - x[chosen[0]]), 0.0)
    while len(chosen) < C:
        total = d2.sum()
        if total <= 0.0:
            break
        nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_norms(x - x[nxt]))
        d2[nxt] = 0.0
    return x[np.array(chosen)].copy()


def kmeans(x: np.ndarray, C: int, max_iters: int = 100, seed: int = 0) -> tuple[KMeansModel, np.ndarray]:
    """Lloyd's algorithm from k-means++ seeds; returns the model and 0-based assignments.

    Runs until the assignment is a fixpoint or ``max_iters``. Clusters that lose all
    their points keep their last centroid and are not re-seeded.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 1:
        raise ValueError("kmeans needs an (N >= 1, D) feature matrix")
    if C < 1:
        raise ValueError("C must be >= 1")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plus_plus(x, C, rng)
    labels, dist = assign(x, centroids)
    model = KMeansModel(centroids, C)
    for it in range(max_iters):
        counts = np.bincount(labels, minlength=len(centroids))
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        obj = float(np.sum(_sq_norms(x - centroids[labels])))
        model.objective_trace.append(obj)
        model.n_iter = it + 1
        new_labels, dist = assign(x, centroids)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    model.centroids = centroids
    return model, labels


def init_labels(features: np.ndarray, refs: Iterable[tuple[str, int]], C: int = 10000, seed: int = 0,
                max_iters: int = 100) -> list[SegmentLabel]:
    """Every segment gets the 1-based index of its k-means cluster."""
    refs = list(refs)
    _, labels = kmeans(features, C, max_iters, seed)
    return [SegmentLabel(f, int(s), int(k) + 1) for (f, s), k in zip(refs, labels)]


def write_labels(path: str | Path, labels: Iterable[SegmentLabel]) -> None:
    with open(path, "w") as fh:
        for lab in labels:
            fh.write(f"{lab.frame_id} {lab.segment_id} {lab.y}\n")


def read_labels(path: str | Path) -> list[SegmentLabel]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            f, s, y = line.split()
            out.append(SegmentLabel(f, int(s), int(y)))
    return out
