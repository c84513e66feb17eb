"""Stochastic LTI model, output labeling, and exact simulation stepping.

The system is x(t+1) = A x(t) + B u(t) + Bw w(t), y(t) = C x(t) with
w ~ N(noise_mean, noise_cov), state constrained to ``state_box`` and input to
``input_box``. All types are immutable after construction and every operation
is a pure function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError
from .geometry import Box

EMPTY_LETTER = 0


def _as_matrix(m, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(m, dtype=float))
    if arr.ndim != 2:
        raise ContractError(f"{name} must be a matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class LtiGmdp:
    """Discrete-time stochastic LTI system with Gaussian disturbance."""

    A: np.ndarray
    B: np.ndarray
    Bw: np.ndarray
    C: np.ndarray
    state_box: Box
    input_box: Box
    x0: np.ndarray
    noise_mean: Optional[np.ndarray] = None
    noise_cov: Optional[np.ndarray] = None

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        Bw = _as_matrix(self.Bw, "Bw")
        C = _as_matrix(self.C, "C")
        n_x = A.shape[0]
        if A.shape != (n_x, n_x):
            raise ContractError(f"A must be square, got {A.shape}")
        if B.shape[0] != n_x:
            raise ContractError(f"B row count {B.shape[0]} != state dim {n_x}")
        if Bw.shape[0] != n_x:
            raise ContractError(f"Bw row count {Bw.shape[0]} != state dim {n_x}")
        if C.shape[1] != n_x:
            raise ContractError(f"C column count {C.shape[1]} != state dim {n_x}")
        n_w = Bw.shape[1]
        mean = (
            np.zeros(n_w)
            if self.noise_mean is None
            else np.asarray(self.noise_mean, dtype=float)
        )
        cov = (
            np.eye(n_w)
            if self.noise_cov is None
            else np.asarray(self.noise_cov, dtype=float)
        )
        if mean.shape != (n_w,):
            raise ContractError(f"noise_mean must have shape ({n_w},), got {mean.shape}")
        if cov.shape != (n_w, n_w):
            raise ContractError(f"noise_cov must be {n_w}x{n_w}, got {cov.shape}")
        if not np.allclose(cov, cov.T):
            raise ContractError("noise_cov must be symmetric")
        eigvals = np.linalg.eigvalsh(cov)
        if np.min(eigvals) < -1e-12:
            raise ContractError(f"noise_cov must be PSD, min eigenvalue {np.min(eigvals)}")
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (n_x,):
            raise ContractError(f"x0 must have shape ({n_x},), got {x0.shape}")
        if self.state_box.dim != n_x:
            raise ContractError("state_box dimension mismatch")
        if self.input_box.dim != B.shape[1]:
            raise ContractError("input_box dimension mismatch")
        if not self.state_box.contains(x0):
            raise ContractError(f"x0={x0} outside state box")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Bw", Bw)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "noise_mean", mean)
        object.__setattr__(self, "noise_cov", cov)
        # Whitened disturbance channel: Bw_eff w0 with w0 ~ N(0, I) has the
        # same law as Bw (w - mean). Abstraction kernels require the per-state
        # noise channels to be independent, i.e. Bw_eff Bw_eff^T diagonal.
        if np.allclose(cov, np.diag(np.diag(cov))):
            bw_eff = Bw * np.sqrt(np.diag(cov))
        else:
            vals, vecs = np.linalg.eigh(cov)
            bw_eff = Bw @ (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T
            cross = bw_eff @ bw_eff.T
            if not np.allclose(cross, np.diag(np.diag(cross)), atol=1e-10):
                raise ContractError(
                    "non-diagonal noise covariance: whitening Bw*cov^(1/2) does not "
                    "decouple the per-dimension noise channels "
                    f"(off-diagonal coupling {cross - np.diag(np.diag(cross))!r})"
                )
        object.__setattr__(self, "_bw_eff", bw_eff)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_w(self) -> int:
        return self.Bw.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @property
    def bw_eff(self) -> np.ndarray:
        """Disturbance matrix against standard-normal noise (covariance absorbed)."""
        return self._bw_eff

    def sample_noise(self, rng: np.random.Generator, count: int = 1) -> np.ndarray:
        """Draw ``count`` disturbance realizations w ~ N(noise_mean, noise_cov)."""
        return rng.multivariate_normal(self.noise_mean, self.noise_cov, size=count)


@dataclass(frozen=True)
class Region:
    """A labeled closed hyperrectangle in the output space."""

    box: Box
    proposition: str


@dataclass(frozen=True)
class LabelMap:
    """Ordered labeled regions over the output space.

    A point's letter is the set of all propositions whose (closed) region
    contains it, encoded as a bitmask over the declaration order. Points in no
    region carry the empty letter.
    """

    regions: Tuple[Region, ...]

    def __post_init__(self):
        regions = tuple(self.regions)
        names = [r.proposition for r in regions]
        if len(set(names)) != len(names):
            raise ContractError(f"duplicate proposition names in label map: {names}")
        object.__setattr__(self, "regions", regions)

    @property
    def propositions(self) -> Tuple[str, ...]:
        return tuple(r.proposition for r in self.regions)

    @property
    def n_props(self) -> int:
        return len(self.regions)

    def letter(self, y) -> int:
        """Bitmask letter of a single output point."""
        y = np.asarray(y, dtype=float)
        mask = 0
        for bit, region in enumerate(self.regions):
            if region.box.contains(y):
                mask |= 1 << bit
        return mask

    def letters_of_points(self, pts: np.ndarray) -> np.ndarray:
        """Vectorized letters for an (m, n_y) array of output points."""
        pts = np.asarray(pts, dtype=float)
        out = np.zeros(pts.shape[0], dtype=np.int64)
        for bit, region in enumerate(self.regions):
            out |= region.box.contains_points(pts).astype(np.int64) << bit
        return out

    def letter_names(self, letter: int) -> frozenset:
        return frozenset(
            r.proposition for bit, r in enumerate(self.regions) if letter & (1 << bit)
        )

    def format_letter(self, letter: int) -> str:
        names = sorted(self.letter_names(letter))
        return "{" + ",".join(names) + "}" if names else "{}"


@dataclass(frozen=True)
class Trace:
    """A finite closed-loop path with its letters and acceptance verdict."""

    states: np.ndarray
    inputs: np.ndarray
    letters: Sequence[int]
    satisfied: bool
    dfa_states: Sequence[int] = field(default=())

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        inputs = np.asarray(self.inputs, dtype=float)
        if len(states) != len(inputs) + 1:
            raise ContractError(
                f"trace needs one more state than inputs, got {len(states)} states "
                f"and {len(inputs)} inputs"
            )
        if len(self.letters) != len(states):
            raise ContractError("trace needs one letter per state")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "letters", tuple(int(v) for v in self.letters))


def step(model: LtiGmdp, x, u, w) -> np.ndarray:
    """One exact transition A x + B u + Bw w; deterministic given w."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if x.shape[-1] != model.n_x:
        raise ContractError(f"state dim {x.shape[-1]} != {model.n_x}")
    if u.shape[-1] != model.n_u:
        raise ContractError(f"input dim {u.shape[-1]} != {model.n_u}")
    if w.shape[-1] != model.n_w:
        raise ContractError(f"noise dim {w.shape[-1]} != {model.n_w}")
    return x @ model.A.T + u @ model.B.T + w @ model.Bw.T


def output_letter(model: LtiGmdp, labels: LabelMap, x) -> int:
    """Letter of the output y = C x; empty letter when no region contains y."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ContractError(f"state must be finite, got {x}")
    return labels.letter(model.C @ x)
