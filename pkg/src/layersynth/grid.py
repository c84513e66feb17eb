"""Uniform gridding of the state space and Gaussian transition kernels.

Cells partition an axis-aligned box (possibly a sub-box of the state box)
with representative points at the centers. Transitions are factorized per
state dimension when the dynamics decouple dimension-wise; otherwise a dense
kernel per (cell, input) is available under a size cap. Mass leaving the
gridded box goes to a designated absorbing sink.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.special import ndtr

from .errors import ConfigurationError, ContractError, ResourceError
from .geometry import Box
from .model import LtiGmdp

DEFAULT_MEMORY_BUDGET = 4 * 1024**3


@dataclass(frozen=True)
class FactorizedKernel:
    """Per-dimension transition factors F_d[cell, input_level, next_cell].

    The full kernel is the product over dimensions; per-dimension residual
    mass (1 - row sum) leaves the gridded box and lands in the sink.
    """

    factors: Tuple[np.ndarray, ...]

    @property
    def shape(self):
        return tuple(f.shape[0] for f in self.factors)

    @property
    def input_shape(self):
        return tuple(f.shape[1] for f in self.factors)

    def expectation(self, w: np.ndarray) -> np.ndarray:
        """E[c, u] = sum_{c+} P(c+|c,u) w[c+] over in-grid successors.

        ``w`` is flat over cells (C-order); the result is (n_cells, n_inputs)
        flat in the same order. The sink contributes zero.
        """
        dims = self.shape
        tensor = np.asarray(w, dtype=float).reshape(dims)
        labels = list(range(len(dims)))  # axis d holds successor index c'_d
        pairs = []
        for d in reversed(range(len(dims))):
            axis = labels.index(d)
            tensor = np.tensordot(self.factors[d], tensor, axes=([2], [axis]))
            labels.pop(axis)
            labels = [("c", d), ("u", d)] + labels
            pairs.insert(0, d)
        cell_axes = [labels.index(("c", d)) for d in range(len(dims))]
        input_axes = [labels.index(("u", d)) for d in range(len(dims))]
        tensor = np.transpose(tensor, cell_axes + input_axes)
        n_cells = int(np.prod(dims))
        n_inputs = int(np.prod(self.input_shape))
        return tensor.reshape(n_cells, n_inputs)

    def row(self, cell_idx: int, input_idx: int) -> np.ndarray:
        """Successor distribution over in-grid cells for one (cell, input)."""
        dims = self.shape
        udims = self.input_shape
        cidx = np.unravel_index(cell_idx, dims)
        uidx = np.unravel_index(input_idx, udims)
        out = np.array(1.0)
        for d in range(len(dims)):
            out = np.multiply.outer(out, self.factors[d][cidx[d], uidx[d]])
        return out.reshape(-1)

    def in_grid_mass(self) -> np.ndarray:
        """Total non-sink mass per (cell, input), flat ordering."""
        mass = np.array(1.0)
        for f in self.factors:
            mass = np.multiply.outer(mass, f.sum(axis=2))
        dims = self.shape
        udims = self.input_shape
        n = len(dims)
        # axes are (c0,u0,c1,u1,...) after the repeated outer products
        cell_axes = [2 * d for d in range(n)]
        input_axes = [2 * d + 1 for d in range(n)]
        mass = np.transpose(mass, cell_axes + input_axes)
        return mass.reshape(int(np.prod(dims)), int(np.prod(udims)))


@dataclass(frozen=True)
class DenseKernel:
    """Explicit kernel P[cell, input, next_cell]; sink mass is the residual."""

    probs: np.ndarray

    def expectation(self, w: np.ndarray) -> np.ndarray:
        return self.probs @ np.asarray(w, dtype=float)

    def row(self, cell_idx: int, input_idx: int) -> np.ndarray:
        return self.probs[cell_idx, input_idx]

    def in_grid_mass(self) -> np.ndarray:
        return self.probs.sum(axis=2)


@dataclass(frozen=True)
class GridAbstraction:
    """Finite-state abstraction over a uniformly partitioned box."""

    box: Box
    counts: Tuple[int, ...]
    per_dim_edges: Tuple[np.ndarray, ...]
    reps_per_dim: Tuple[np.ndarray, ...]
    input_levels: Tuple[np.ndarray, ...]
    beta_box: Box
    beta_policy: str
    kernel: Optional[object] = field(default=None, compare=False)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.counts))

    @property
    def sink_index(self) -> int:
        return self.n_cells

    @property
    def n_inputs(self) -> int:
        return int(np.prod([len(v) for v in self.input_levels]))

    @property
    def widths(self) -> np.ndarray:
        return self.box.widths / np.asarray(self.counts, dtype=float)

    @property
    def dim(self) -> int:
        return len(self.counts)

    def rep(self, cell_idx: int) -> np.ndarray:
        idx = np.unravel_index(cell_idx, self.counts)
        return np.array([self.reps_per_dim[d][idx[d]] for d in range(self.dim)])

    def reps_array(self) -> np.ndarray:
        grids = np.meshgrid(*self.reps_per_dim, indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)

    def input_vector(self, input_idx: int) -> np.ndarray:
        udims = tuple(len(v) for v in self.input_levels)
        idx = np.unravel_index(input_idx, udims)
        return np.array([self.input_levels[d][idx[d]] for d in range(len(udims))])

    def inputs_array(self) -> np.ndarray:
        grids = np.meshgrid(*self.input_levels, indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)

    def cell_bounds(self, cell_idx: int) -> Box:
        idx = np.unravel_index(cell_idx, self.counts)
        lows = np.array([self.per_dim_edges[d][idx[d]] for d in range(self.dim)])
        highs = np.array([self.per_dim_edges[d][idx[d] + 1] for d in range(self.dim)])
        return Box(lows, highs)

    def max_rep_distance(self, d_diag: np.ndarray) -> float:
        """Largest D-norm distance from any point of a cell to its center."""
        half = 0.5 * self.widths
        return float(np.sqrt(np.sum(np.asarray(d_diag) * half**2)))

    def summary(self) -> str:
        lines = [
            f"gridded box: {self.box.lows.tolist()} .. {self.box.highs.tolist()}",
            f"cells per dimension: {list(self.counts)}",
            f"cell widths: {[f'{w:.9g}' for w in self.widths]}",
            f"input levels per dimension: {[len(v) for v in self.input_levels]}",
            f"offset polytope policy: {self.beta_policy}",
            f"offset polytope: {self.beta_box.lows.tolist()} .. "
            f"{self.beta_box.highs.tolist()}",
            f"total cells: {self.n_cells} (+ sink)",
        ]
        return "\n".join(lines)


def build_grid(
    model: LtiGmdp,
    box: Box,
    counts,
    input_counts,
    beta_policy: str = "half",
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> GridAbstraction:
    """Partition ``box`` uniformly into the given per-dimension cell counts.

    ``beta_policy`` selects the offset polytope: "half" is the set of offsets
    from any cell point to its center (+- half cell width), "paper-compat"
    doubles it to +- one full cell width.
    """
    counts = tuple(int(c) for c in counts)
    input_counts = tuple(int(c) for c in input_counts)
    if len(counts) != model.n_x:
        raise ContractError(f"need {model.n_x} cell counts, got {len(counts)}")
    if len(input_counts) != model.n_u:
        raise ContractError(f"need {model.n_u} input counts, got {len(input_counts)}")
    if any(c < 1 for c in counts) or any(c < 1 for c in input_counts):
        raise ContractError("cell and input counts must be >= 1")
    if not (
        np.all(box.lows >= model.state_box.lows - 1e-12)
        and np.all(box.highs <= model.state_box.highs + 1e-12)
    ):
        raise ContractError("gridded box must lie within the model state box")
    est = 8 * sum(c * (c + 1) * u for c, u in zip(counts, input_counts))
    est += 8 * int(np.prod(counts)) * model.n_x
    if est > memory_budget:
        raise ResourceError(
            f"abstraction estimate {est} bytes exceeds budget {memory_budget} bytes"
        )
    edges = tuple(
        np.linspace(box.lows[d], box.highs[d], counts[d] + 1) for d in range(box.dim)
    )
    reps = tuple(0.5 * (e[:-1] + e[1:]) for e in edges)
    levels = []
    for d in range(model.n_u):
        k = input_counts[d]
        lo, hi = model.input_box.lows[d], model.input_box.highs[d]
        levels.append(
            np.linspace(lo, hi, k) if k >= 2 else np.array([0.5 * (lo + hi)])
        )
    widths = box.widths / np.asarray(counts, dtype=float)
    if beta_policy == "half":
        half = 0.5 * widths
    elif beta_policy == "paper-compat":
        half = widths
    else:
        raise ConfigurationError(f"unknown beta policy {beta_policy!r}")
    beta_box = Box(-half, half)
    return GridAbstraction(
        box=box,
        counts=counts,
        per_dim_edges=edges,
        reps_per_dim=reps,
        input_levels=tuple(levels),
        beta_box=beta_box,
        beta_policy=beta_policy,
    )


def _factorizable(model: LtiGmdp) -> bool:
    """Each dimension's next-state mean must depend only on its own components."""
    A, B = model.A, model.B
    if not np.allclose(A, np.diag(np.diag(A))):
        return False
    if B.shape[0] != B.shape[1] or not np.allclose(B, np.diag(np.diag(B))):
        return False
    bw = model.bw_eff
    cross = bw @ bw.T
    return np.allclose(cross, np.diag(np.diag(cross)), atol=1e-12)


def _per_dim_sigmas(model: LtiGmdp) -> np.ndarray:
    bw = model.bw_eff
    return np.sqrt(np.maximum(np.diag(bw @ bw.T), 0.0))


def _interval_probs(edges: np.ndarray, means: np.ndarray, sigma: float) -> np.ndarray:
    """P(next in [e_k, e_k+1]) per mean; degenerate sigma collapses to a point mass."""
    if sigma > 0.0:
        cdf = ndtr((edges[None, :] - means[:, None]) / sigma)
        return np.diff(cdf, axis=1)
    n = edges.size - 1
    out = np.zeros((means.size, n))
    idx = np.searchsorted(edges, means, side="left") - 1
    inside = (means >= edges[0]) & (means <= edges[-1])
    idx = np.clip(idx, 0, n - 1)
    out[np.arange(means.size)[inside], idx[inside]] = 1.0
    return out


def transition_factors(
    grid: GridAbstraction,
    model: LtiGmdp,
    dense_fallback: bool = False,
    dense_cap: int = 200_000_000,
):
    """Gaussian transition kernel of the abstraction.

    For decoupled dynamics, returns per-dimension factor matrices: the
    probability that dimension d lands in each cell interval is the Gaussian
    CDF difference with mean (A x + B u + Bw mu)_d and the dimension's
    effective noise standard deviation. The full kernel is the product over
    dimensions. Coupled dynamics fall back to a dense kernel when enabled.
    The kernel is cached on the grid.
    """
    if grid.kernel is not None:
        return grid.kernel
    drift = model.Bw @ model.noise_mean
    if _factorizable(model):
        sigmas = _per_dim_sigmas(model)
        factors = []
        for d in range(grid.dim):
            a = model.A[d, d]
            b = model.B[d, d]
            edges = grid.per_dim_edges[d]
            reps = grid.reps_per_dim[d]
            levels = grid.input_levels[d]
            f = np.empty((reps.size, levels.size, reps.size))
            for ui, u in enumerate(levels):
                means = a * reps + b * u + drift[d]
                f[:, ui, :] = _interval_probs(edges, means, sigmas[d])
            factors.append(f)
        kernel = FactorizedKernel(tuple(factors))
    else:
        if not dense_fallback:
            raise ConfigurationError(
                "dynamics do not decouple per dimension; enable the dense kernel "
                "fallback or supply diagonal A, B, and noise channel"
            )
        n_cells = grid.n_cells
        n_inputs = grid.n_inputs
        size = n_cells * n_inputs * n_cells * 8
        if size > dense_cap:
            raise ResourceError(
                f"dense kernel would need {size} bytes, above the cap {dense_cap}"
            )
        sigmas = _per_dim_sigmas(model)
        reps = grid.reps_array()
        inputs = grid.inputs_array()
        probs = np.ones((n_cells, n_inputs, n_cells))
        for d in range(grid.dim):
            edges = grid.per_dim_edges[d]
            means = (reps @ model.A[d])[:, None] + (inputs @ model.B[d])[None, :]
            means = means + drift[d]
            per_dim = _interval_probs(edges, means.reshape(-1), sigmas[d]).reshape(
                n_cells, n_inputs, grid.counts[d]
            )
            # expand along the successor axis in C-order
            reps_d = np.unravel_index(np.arange(n_cells), grid.counts)[d]
            probs *= per_dim[:, :, reps_d]
        kernel = DenseKernel(probs)
    object.__setattr__(grid, "kernel", kernel)
    return kernel


def project(grid: GridAbstraction, x) -> int:
    """Cell index containing x, or the sink index outside the gridded box.

    Interior boundary points resolve to the lower-index cell.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ContractError(f"state must be finite, got {x}")
    idx = []
    for d in range(grid.dim):
        edges = grid.per_dim_edges[d]
        if x[d] < edges[0] or x[d] > edges[-1]:
            return grid.sink_index
        k = int(np.searchsorted(edges, x[d], side="left")) - 1
        idx.append(min(max(k, 0), grid.counts[d] - 1))
    return int(np.ravel_multi_index(tuple(idx), grid.counts))


def project_points(grid: GridAbstraction, pts: np.ndarray) -> np.ndarray:
    """Vectorized :func:`project`; returns the sink index for outside points."""
    pts = np.asarray(pts, dtype=float)
    out_idx = np.zeros(pts.shape[0], dtype=np.int64)
    outside = np.zeros(pts.shape[0], dtype=bool)
    per_dim = []
    for d in range(grid.dim):
        edges = grid.per_dim_edges[d]
        outside |= (pts[:, d] < edges[0]) | (pts[:, d] > edges[-1])
        k = np.searchsorted(edges, pts[:, d], side="left") - 1
        per_dim.append(np.clip(k, 0, grid.counts[d] - 1))
    out_idx = np.ravel_multi_index(tuple(per_dim), grid.counts)
    out_idx[outside] = grid.sink_index
    return out_idx
