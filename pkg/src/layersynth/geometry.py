"""Axis-aligned boxes and diagonal-ellipsoid tests shared by the label logic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned hyperrectangle given by per-dimension [low, high] bounds."""

    lows: np.ndarray
    highs: np.ndarray

    def __post_init__(self):
        lows = np.asarray(self.lows, dtype=float)
        highs = np.asarray(self.highs, dtype=float)
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)
        if lows.shape != highs.shape or lows.ndim != 1:
            raise ValueError("box bounds must be 1-D arrays of equal length")
        if not np.all(lows < highs):
            raise ValueError(
                f"box lows must be strictly below highs, got lows={lows}, highs={highs}"
            )

    @classmethod
    def from_pairs(cls, pairs) -> "Box":
        arr = np.asarray(pairs, dtype=float)
        return cls(arr[:, 0], arr[:, 1])

    @property
    def dim(self) -> int:
        return self.lows.size

    @property
    def widths(self) -> np.ndarray:
        return self.highs - self.lows

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lows + self.highs)

    def contains(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lows) and np.all(x <= self.highs))

    def contains_points(self, pts: np.ndarray) -> np.ndarray:
        """Vectorized closed-box membership for an (m, dim) array of points."""
        pts = np.asarray(pts, dtype=float)
        return np.all((pts >= self.lows) & (pts <= self.highs), axis=-1)

    def shrink(self, margin) -> "Box":
        """Shrink all faces inward by ``margin`` (scalar or per-dimension)."""
        margin = np.broadcast_to(np.asarray(margin, dtype=float), self.lows.shape)
        lo = self.lows + margin
        hi = self.highs - margin
        if not np.all(lo < hi):
            raise ValueError(f"margin {margin} collapses box {self}")
        return Box(lo, hi)

    def vertices(self) -> np.ndarray:
        """All 2^dim corner points, lexicographic in (low, high) choices."""
        n = self.dim
        out = np.empty((2**n, n))
        for k in range(2**n):
            for d in range(n):
                out[k, d] = self.highs[d] if (k >> d) & 1 else self.lows[d]
        return out


def ellipsoid_semiaxes(radius: float, diag_weights: np.ndarray) -> np.ndarray:
    """Semi-axis lengths of {x : sum_d w_d x_d^2 <= radius^2} for diagonal weights."""
    diag_weights = np.asarray(diag_weights, dtype=float)
    if np.any(diag_weights <= 0):
        raise ValueError("diagonal weights must be positive")
    return radius / np.sqrt(diag_weights)


def ellipsoid_intersects_box(center, semiaxes, box: Box) -> bool:
    """Exact test for an axis-aligned ellipsoid meeting a closed box.

    Uses the closest point of the box to the center in the scaled metric.
    """
    center = np.asarray(center, dtype=float)
    gap = np.maximum(box.lows - center, 0.0) + np.maximum(center - box.highs, 0.0)
    return bool(np.sum((gap / semiaxes) ** 2) <= 1.0)


def ellipsoid_inside_box(center, semiaxes, box: Box) -> bool:
    """Exact test for an axis-aligned ellipsoid contained in a closed box."""
    center = np.asarray(center, dtype=float)
    return bool(
        np.all(center - semiaxes >= box.lows) and np.all(center + semiaxes <= box.highs)
    )


def ellipsoids_intersect_box(centers: np.ndarray, semiaxes, box: Box) -> np.ndarray:
    """Vectorized ``ellipsoid_intersects_box`` over an (m, dim) array of centers."""
    centers = np.asarray(centers, dtype=float)
    gap = np.maximum(box.lows - centers, 0.0) + np.maximum(centers - box.highs, 0.0)
    return np.sum((gap / semiaxes) ** 2, axis=-1) <= 1.0


def ellipsoids_inside_box(centers: np.ndarray, semiaxes, box: Box) -> np.ndarray:
    """Vectorized ``ellipsoid_inside_box`` over an (m, dim) array of centers."""
    centers = np.asarray(centers, dtype=float)
    return np.all(
        (centers - semiaxes >= box.lows) & (centers + semiaxes <= box.highs), axis=-1
    )
