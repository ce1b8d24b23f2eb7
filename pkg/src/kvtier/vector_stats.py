"""Vector arithmetic and exact online moments for cluster statistics."""

from dataclasses import dataclass

import numpy as np

__all__ = ["ClusterStats", "sq_distance", "update_stats", "batch_stats", "variance"]


@dataclass(frozen=True)
class ClusterStats:
    """Running size, centroid and scatter of a set of key vectors.

    ``scatter`` is the sum of squared Euclidean distances of the members to
    ``centroid``. An empty set has ``n == 0`` and ``centroid is None``.
    """

    n: int = 0
    centroid: np.ndarray | None = None
    scatter: float = 0.0

    @property
    def dim(self):
        return None if self.centroid is None else self.centroid.shape[0]

    def variance(self):
        return variance(self)


def _as_vec(x):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def sq_distance(a, b):
    a = _as_vec(a)
    b = _as_vec(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    d = a - b
    return float(d @ d)


def update_stats(s, x):
    """Stats of the member set with ``x`` added (single-pass Welford step)."""
    x = _as_vec(x)
    if s.n == 0:
        return ClusterStats(1, x.copy(), 0.0)
    if x.shape[0] != s.centroid.shape[0]:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {s.centroid.shape[0]}")
    n = s.n + 1
    delta = x - s.centroid
    centroid = s.centroid + delta / n
    scatter = s.scatter + float(delta @ (x - centroid))
    return ClusterStats(n, centroid, max(scatter, 0.0))


def batch_stats(xs):
    """Exact two-pass mean and scatter of a non-empty set of vectors."""
    arr = np.asarray(xs, dtype=np.float64)
    if arr.ndim != 2:
        if arr.size == 0:
            raise ValueError("batch_stats of an empty set")
        raise ValueError(f"expected equal-length vectors, got array of shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError("batch_stats of an empty set")
    mean = arr.mean(axis=0)
    diff = arr - mean
    scatter = float(np.einsum("ij,ij->", diff, diff))
    return ClusterStats(arr.shape[0], mean, scatter)


def variance(s):
    """Mean squared distance to the centroid; 0 for empty or singleton sets."""
    return s.scatter / max(s.n, 1)
