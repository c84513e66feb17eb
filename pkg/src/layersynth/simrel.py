"""Multi-layered (epsilon, delta) similarity quantification.

The relations are weighted ellipsoids ||x - xhat||_D <= eps_i. Feasibility of
a probability deviation delta_ij for a precision switch eps_i -> eps_j is
decided by positive-semidefiniteness of two parameterized block matrices over
the vertices of the offset polytope, with the allowable noise-mean shift
parameterized as gamma = F (x - xhat) and bounded through the standard-normal
inverse CDF. Minimal deltas come from a closed-form reduction when the
dynamics are isotropic, and from bisection over a structured (F, lambda)
search family otherwise. No semidefinite-programming solver is involved.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.stats import norm

from .errors import ContractError, InfeasibleError
from .geometry import Box
from .model import LtiGmdp

logger = logging.getLogger(__name__)

BISECT_TOL = 1e-4
EIG_TOL = -1e-9
LAMBDA_GRID = 64
MAX_VERTEX_DIM = 12
DEFAULT_D_SHIFT = 1e-6


@dataclass(frozen=True)
class LayerSpec:
    """Precision vector, deviation matrix, and certificates of a layering."""

    eps: np.ndarray
    delta: np.ndarray
    D: np.ndarray
    interface_gain: Optional[np.ndarray] = None
    F: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)
    lam: Dict[Tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        eps = np.asarray(self.eps, dtype=float).reshape(-1)
        delta = np.atleast_2d(np.asarray(self.delta, dtype=float))
        d_mat = np.atleast_2d(np.asarray(self.D, dtype=float))
        if np.any(eps <= 0):
            raise ContractError(f"precisions must be positive, got {eps}")
        n = eps.size
        if delta.shape != (n, n):
            raise ContractError(f"delta must be {n}x{n}, got {delta.shape}")
        if np.any(delta < 0) or np.any(delta > 1):
            raise ContractError("delta entries must lie in [0, 1]")
        if np.min(np.linalg.eigvalsh(d_mat)) <= 0:
            raise ContractError("weighting matrix must be positive definite")
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "D", d_mat)
        gain = self.interface_gain
        if gain is not None:
            object.__setattr__(
                self, "interface_gain", np.atleast_2d(np.asarray(gain, dtype=float))
            )

    @property
    def n_layers(self) -> int:
        return self.eps.size

    def alpha(self, i: int, j: int) -> float:
        return float(self.eps[j] / self.eps[i])

    def report(self) -> str:
        lines = ["precision vector eps:"]
        lines.append("  " + " ".join(f"{e:.9g}" for e in self.eps))
        lines.append("deviation matrix delta:")
        for row in self.delta:
            lines.append("  " + " ".join(f"{v:.9g}" for v in row))
        lines.append("weighting matrix D:")
        for row in self.D:
            lines.append("  " + " ".join(f"{v:.9g}" for v in row))
        if self.interface_gain is not None:
            lines.append("interface gain K:")
            for row in self.interface_gain:
                lines.append("  " + " ".join(f"{v:.9g}" for v in row))
        for (i, j), f_mat in sorted(self.F.items()):
            lam = self.lam.get((i, j), float("nan"))
            flat = " ".join(f"{v:.9g}" for v in np.asarray(f_mat).reshape(-1))
            lines.append(f"certificate ({i + 1}->{j + 1}): lambda {lam:.9g}; F {flat}")
        return "\n".join(lines)


def weighting_matrix(C, shift: float = DEFAULT_D_SHIFT) -> np.ndarray:
    """Smallest-clamped D with C^T C <= D, positive definite.

    Eigenvalues of C^T C below ``shift`` are raised to ``shift``; the ordering
    is then verified spectrally.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    m = C.T @ C
    vals, vecs = np.linalg.eigh(m)
    d = (vecs * np.maximum(vals, shift)) @ vecs.T
    d = 0.5 * (d + d.T)
    check = np.min(np.linalg.eigvalsh(d - m))
    if check < -1e-12:
        raise ContractError(f"weighting matrix ordering violated by {check}")
    return d


def shift_radius(delta: float) -> float:
    """Bound on the standard-normal mean shift spending probability delta."""
    if not 0.0 <= delta < 1.0:
        raise ContractError(f"probability deviation must be in [0, 1), got {delta}")
    return abs(2.0 * norm.ppf((1.0 - delta) / 2.0))


def delta_of_radius(r: float) -> float:
    """Inverse of :func:`shift_radius`."""
    return float(2.0 * norm.cdf(r / 2.0) - 1.0)


def _abar(model: LtiGmdp, gain) -> np.ndarray:
    if gain is None:
        return model.A
    gain = np.atleast_2d(np.asarray(gain, dtype=float))
    return model.A + model.B @ gain


def check_feasibility(
    model: LtiGmdp,
    D,
    eps_i: float,
    eps_j: float,
    delta: float,
    beta_vertices,
    F,
    lam: float,
    gain=None,
    eig_tol: float = EIG_TOL,
) -> bool:
    """Both parameterized block matrices PSD at every offset vertex.

    The input-bound block caps the shift gain F by the radius r(delta); the
    contraction block forces the coupled error into the eps_j ellipsoid.
    """
    try:
        D = np.atleast_2d(np.asarray(D, dtype=float))
        F = np.atleast_2d(np.asarray(F, dtype=float))
        n_x = model.n_x
        n_w = model.n_w
        if F.shape != (n_w, n_x):
            raise ContractError(f"F must be {n_w}x{n_x}, got {F.shape}")
        if lam <= 0:
            return False
        r = shift_radius(delta)
        alpha = eps_j / eps_i
        bw = model.bw_eff
        abar = _abar(model, gain)
        m1 = np.block([[D / eps_i**2, F.T], [F, r**2 * np.eye(n_w)]])
        if np.min(np.linalg.eigvalsh(0.5 * (m1 + m1.T))) < eig_tol:
            return False
        closed = abar + bw @ F
        for beta in np.atleast_2d(np.asarray(beta_vertices, dtype=float)):
            top = np.hstack([lam * D, np.zeros((n_x, 1)), (D @ closed).T])
            mid = np.hstack(
                [np.zeros((1, n_x)), [[(alpha**2 - lam) * eps_i**2]], (D @ beta)[None, :]]
            )
            bot = np.hstack([D @ closed, (D @ beta)[:, None], D])
            m2 = np.vstack([top, mid, bot])
            if np.min(np.linalg.eigvalsh(0.5 * (m2 + m2.T))) < eig_tol:
                return False
        return True
    except (np.linalg.LinAlgError, ValueError) as exc:
        logger.warning("feasibility check failed numerically: %s", exc)
        return False


def _contraction_margin(model, D, eps_i, eps_j, beta_vertices, F, lam, gain):
    """Smallest eigenvalue of the contraction block over all offset vertices."""
    n_x = model.n_x
    alpha = eps_j / eps_i
    bw = model.bw_eff
    closed = _abar(model, gain) + bw @ np.atleast_2d(F)
    worst = np.inf
    for beta in np.atleast_2d(np.asarray(beta_vertices, dtype=float)):
        top = np.hstack([lam * D, np.zeros((n_x, 1)), (D @ closed).T])
        mid = np.hstack(
            [np.zeros((1, n_x)), [[(alpha**2 - lam) * eps_i**2]], (D @ beta)[None, :]]
        )
        bot = np.hstack([D @ closed, (D @ beta)[:, None], D])
        m2 = np.vstack([top, mid, bot])
        worst = min(worst, float(np.min(np.linalg.eigvalsh(0.5 * (m2 + m2.T)))))
    return worst


def _best_lambda(model, D, eps_i, eps_j, beta_vertices, F, gain):
    """Line search then golden-section refine of the contraction margin."""
    alpha = eps_j / eps_i
    hi = alpha**2 * (1.0 - 1e-12)
    grid = np.logspace(np.log10(1e-6), np.log10(hi), LAMBDA_GRID)
    margins = [
        _contraction_margin(model, D, eps_i, eps_j, beta_vertices, F, lam, gain)
        for lam in grid
    ]
    k = int(np.argmax(margins))
    lo_idx, hi_idx = max(k - 1, 0), min(k + 1, len(grid) - 1)
    a, b = grid[lo_idx], grid[hi_idx]
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    c = b - phi * (b - a)
    d = a + phi * (b - a)
    fc = _contraction_margin(model, D, eps_i, eps_j, beta_vertices, F, c, gain)
    fd = _contraction_margin(model, D, eps_i, eps_j, beta_vertices, F, d, gain)
    for _ in range(48):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = _contraction_margin(model, D, eps_i, eps_j, beta_vertices, F, c, gain)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = _contraction_margin(model, D, eps_i, eps_j, beta_vertices, F, d, gain)
    best = max([(margins[k], grid[k]), (fc, c), (fd, d)])
    return best[1], best[0]


def _isotropic_scalars(model, D, gain):
    """(a, b, d) when Abar, the noise channel, and D are multiples of identity."""
    abar = _abar(model, gain)
    bw = model.bw_eff
    n = model.n_x
    def scalar_of(m):
        m = np.atleast_2d(m)
        if m.shape[0] != m.shape[1]:
            return None
        s = m[0, 0]
        return s if np.allclose(m, s * np.eye(m.shape[0]), atol=1e-12) else None
    a = scalar_of(abar)
    b = scalar_of(bw) if bw.shape[0] == bw.shape[1] else None
    d = scalar_of(np.atleast_2d(np.asarray(D, dtype=float)))
    if a is None or b is None or d is None or abs(b) < 1e-15 or d <= 0:
        return None
    return a, b, d


def _max_beta_norm(beta_vertices, D):
    betas = np.atleast_2d(np.asarray(beta_vertices, dtype=float))
    return float(np.max(np.sqrt(np.einsum("vi,ij,vj->v", betas, D, betas))))


def min_delta(
    model: LtiGmdp,
    D,
    eps_i: float,
    eps_j: float,
    beta_box: Box,
    gain=None,
    tol: float = BISECT_TOL,
) -> Tuple[float, np.ndarray, float]:
    """Smallest certified probability deviation for the switch eps_i -> eps_j.

    Returns (delta, F, lambda) with the certificate replayable through
    :func:`check_feasibility`. Raises when even delta -> 1 is infeasible,
    which happens when the offset polytope outgrows the target ellipsoid.
    """
    if eps_i <= 0 or eps_j <= 0:
        raise ContractError("precisions must be positive")
    D = np.atleast_2d(np.asarray(D, dtype=float))
    if beta_box.dim > MAX_VERTEX_DIM:
        raise ContractError(
            f"vertex enumeration capped at {MAX_VERTEX_DIM} dimensions"
        )
    vertices = beta_box.vertices()
    alpha = eps_j / eps_i
    maxb = _max_beta_norm(vertices, D)
    scalars = _isotropic_scalars(model, D, gain)
    if scalars is not None:
        a, b, d = scalars
        slack = alpha * eps_i - maxb
        if slack < 0:
            raise InfeasibleError(
                f"offset polytope too large: max ||beta||_D = {maxb:.6g} exceeds "
                f"the target radius {alpha * eps_i:.6g}; refine the grid or grow eps"
            )
        t = slack / eps_i
        f_needed = max(0.0, (abs(a) - t) / abs(b))
        delta = delta_of_radius(f_needed * eps_i / np.sqrt(d))
        # certify, nudging delta up by the bisection tolerance on numerical
        # boundary cases; the extra radius is spent shrinking the closed loop
        for bump in range(12):
            cand = min(delta + bump * tol, 1.0 - 1e-12)
            r = shift_radius(cand)
            f_mag = min(r * np.sqrt(d) / eps_i, abs(a) / abs(b))
            # the shift opposes the open loop: A + Bw F contracts
            phi = float(np.clip(-a / b, -f_mag, f_mag))
            f_mat = phi * np.eye(model.n_x)[: model.n_w, :]
            lam, margin = _best_lambda(model, D, eps_i, eps_j, vertices, f_mat, gain)
            if margin >= EIG_TOL and check_feasibility(
                model, D, eps_i, eps_j, cand, vertices, f_mat, lam, gain
            ):
                return float(cand), f_mat, float(lam)
        raise InfeasibleError(
            f"closed-form candidate at delta={delta:.6g} failed certification"
        )
    return _min_delta_generic(model, D, eps_i, eps_j, vertices, gain, tol)


def _candidate_fs(model, D, eps_i, delta, gain):
    """Structured shift gains: scaled least-squares alignments of Abar."""
    r = shift_radius(delta)
    abar = _abar(model, gain)
    bw = model.bw_eff
    f0 = -np.linalg.pinv(bw) @ abar
    candidates = [np.zeros((model.n_w, model.n_x))]
    if np.allclose(f0, 0):
        return candidates
    d_inv = np.linalg.inv(D)
    for c in np.linspace(0.2, 1.0, 5):
        f = c * f0
        # largest input-bound-respecting rescale: F eps_i^2 D^-1 F^T <= r^2 I
        gram = f @ (eps_i**2 * d_inv) @ f.T
        top = np.sqrt(max(np.max(np.linalg.eigvalsh(gram)), 0.0))
        if top > 0 and top > r:
            f = f * (r / top) * (1.0 - 1e-12)
        candidates.append(f)
    return candidates


def _feasible_at(model, D, eps_i, eps_j, delta, vertices, gain):
    for f_mat in _candidate_fs(model, D, eps_i, delta, gain):
        lam, margin = _best_lambda(model, D, eps_i, eps_j, vertices, f_mat, gain)
        if margin >= EIG_TOL and check_feasibility(
            model, D, eps_i, eps_j, delta, vertices, f_mat, lam, gain
        ):
            return f_mat, lam
    return None


def _min_delta_generic(model, D, eps_i, eps_j, vertices, gain, tol):
    hit = _feasible_at(model, D, eps_i, eps_j, 0.0, vertices, gain)
    if hit is not None:
        return 0.0, hit[0], float(hit[1])
    hi = 1.0 - 1e-9
    hit_hi = _feasible_at(model, D, eps_i, eps_j, hi, vertices, gain)
    if hit_hi is None:
        maxb = _max_beta_norm(vertices, D)
        raise InfeasibleError(
            f"no deviation below 1 is feasible for eps {eps_i:.6g} -> {eps_j:.6g}; "
            f"max ||beta||_D = {maxb:.6g} against target radius {eps_j:.6g}"
        )
    lo = 0.0
    best = (hi,) + hit_hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        hit = _feasible_at(model, D, eps_i, eps_j, mid, vertices, gain)
        if hit is not None:
            hi = mid
            best = (mid,) + hit
        else:
            lo = mid
    return float(best[0]), best[1], float(best[2])


def layer_matrix(
    model: LtiGmdp, D, eps, beta_box: Box, gain=None, tol: float = BISECT_TOL
) -> LayerSpec:
    """Fill the full deviation matrix by minimizing each (i, j) entry."""
    eps = np.asarray(eps, dtype=float).reshape(-1)
    n = eps.size
    delta = np.zeros((n, n))
    f_by_pair = {}
    lam_by_pair = {}
    for i in range(n):
        for j in range(n):
            dij, f_mat, lam = min_delta(
                model, D, float(eps[i]), float(eps[j]), beta_box, gain=gain, tol=tol
            )
            delta[i, j] = dij
            f_by_pair[(i, j)] = f_mat
            lam_by_pair[(i, j)] = lam
    return LayerSpec(
        eps=eps,
        delta=delta,
        D=np.atleast_2d(np.asarray(D, dtype=float)),
        interface_gain=gain,
        F=f_by_pair,
        lam=lam_by_pair,
    )
