"""Discretization-free waypoint model: sampled graph with ellipsoidal tubes.

Waypoints are uniform samples of the state box kept only when their whole
output ellipsoid carries a single letter. Directed edges exist when the
noise-free system can steer the centers in ``n_s`` steps with inputs inside a
margin-shrunk input box (the margin reserves room for the tracking feedback
K (x - x_nominal)), and the swept tube changes letter at most once. Sampling
repeats until the graph is strongly connected or an augmentation cap is hit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.stats import chi2

from .errors import ConfigurationError, ContractError, InfeasibleError, PartialModelError
from .geometry import (
    Box,
    ellipsoid_semiaxes,
    ellipsoids_inside_box,
    ellipsoids_intersect_box,
)
from .model import LabelMap, LtiGmdp

DEFAULT_INTERP_POINTS = 32
DEFAULT_AUGMENT_ROUNDS = 10


@dataclass(frozen=True)
class WaypointModel:
    """Directed waypoint graph with per-edge nominal steering inputs."""

    points: np.ndarray
    edge_list: Tuple[Tuple[int, int], ...]
    edge_inputs: Tuple[np.ndarray, ...]
    letters: np.ndarray
    eps_w: float
    d_w: float
    K: np.ndarray
    n_s: int
    delta_w: float
    initial: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        object.__setattr__(self, "letters", np.asarray(self.letters, dtype=np.int64))
        object.__setattr__(self, "K", np.atleast_2d(np.asarray(self.K, dtype=float)))

    @property
    def n_waypoints(self) -> int:
        return self.points.shape[0]

    def successors(self, idx: int) -> Tuple[int, ...]:
        return tuple(dst for src, dst in self.edge_list if src == idx)

    def adjacency(self) -> Tuple[Tuple[int, ...], ...]:
        succ = [[] for _ in range(self.n_waypoints)]
        for src, dst in self.edge_list:
            succ[src].append(dst)
        return tuple(tuple(sorted(s)) for s in succ)

    def edge_index(self) -> Dict[Tuple[int, int], int]:
        return {e: k for k, e in enumerate(self.edge_list)}

    def containing(self, x) -> Tuple[int, ...]:
        """Waypoints whose ellipsoid contains the concrete state x."""
        x = np.asarray(x, dtype=float)
        d2 = self.d_w * np.sum((self.points - x) ** 2, axis=1)
        return tuple(int(i) for i in np.nonzero(d2 <= self.eps_w**2)[0])


def _dw_scalar(d_w) -> float:
    arr = np.atleast_2d(np.asarray(d_w, dtype=float))
    if arr.size == 1:
        val = float(arr.reshape(-1)[0])
    else:
        diag = np.diag(arr)
        if not np.allclose(arr, np.diag(diag)) or not np.allclose(diag, diag[0]):
            raise ContractError("waypoint weighting must be a scalar multiple of identity")
        val = float(diag[0])
    if val <= 0:
        raise ContractError("waypoint weighting scalar must be positive")
    return val


def _weighted_norm(m: np.ndarray, d_w: float) -> float:
    """Matrix norm induced by ||x|| = sqrt(d_w) |x|_2; equals the spectral norm."""
    return float(np.linalg.norm(m, 2))


def epsilon_w(model: LtiGmdp, K, d_w, delta_w: float) -> float:
    """Tube radius guaranteeing per-edge arrival with probability 1 - delta_w.

    The closed loop Abar = A + B K must be contractive in the weighted norm;
    the noise magnitude is bounded through the chi-squared inverse CDF at
    confidence 1 - delta_w with one degree of freedom per noise channel.
    """
    if not 0.0 < delta_w < 1.0:
        raise ContractError(f"delta_w must be in (0, 1), got {delta_w}")
    d_w = _dw_scalar(d_w)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    abar = model.A + model.B @ K
    norm_a = _weighted_norm(abar, d_w)
    if norm_a >= 1.0:
        raise InfeasibleError(
            f"closed loop not contractive: ||A + BK|| = {norm_a:.6g} >= 1"
        )
    r_w = float(chi2.ppf(1.0 - delta_w, df=model.n_w))
    norm_b = _weighted_norm(model.bw_eff, d_w)
    return abs(-((norm_a - 1.0) ** -1) * norm_b * (1.0 / d_w) * np.sqrt(r_w))


def _output_semiaxes(model: LtiGmdp, eps: float, d_w: float) -> np.ndarray:
    c_mat = model.C
    if not np.allclose(c_mat, np.diag(np.diag(c_mat))) or c_mat.shape[0] != c_mat.shape[1]:
        raise ConfigurationError(
            "waypoint well-posedness needs a square diagonal output map"
        )
    state_semi = ellipsoid_semiaxes(eps, np.full(model.n_x, d_w))
    return np.abs(np.diag(c_mat)) * state_semi


def _region_flags(model, labels, centers, semi):
    """(may, must) region bitmask arrays for output ellipsoids at ``centers``."""
    outputs = np.atleast_2d(centers) @ model.C.T
    may = np.zeros(outputs.shape[0], dtype=np.int64)
    must = np.zeros(outputs.shape[0], dtype=np.int64)
    for bit, region in enumerate(labels.regions):
        may |= ellipsoids_intersect_box(outputs, semi, region.box).astype(np.int64) << bit
        must |= ellipsoids_inside_box(outputs, semi, region.box).astype(np.int64) << bit
    return may, must


def is_well_posed_point(x_w, eps_w: float, d_w, labels: LabelMap, model: LtiGmdp) -> bool:
    """True iff every output of the ellipsoid around x_w has one letter.

    Equivalently the output ellipsoid straddles no region boundary: each
    region either contains it entirely or misses it entirely.
    """
    d_w = _dw_scalar(d_w)
    semi = _output_semiaxes(model, eps_w, d_w)
    may, must = _region_flags(model, labels, np.atleast_2d(x_w), semi)
    return bool(may[0] == must[0])


def _points_well_posed(points, model, labels, eps_w, d_w):
    semi = _output_semiaxes(model, eps_w, d_w)
    may, must = _region_flags(model, labels, points, semi)
    return may == must, must


def is_well_posed_edge(
    x_w,
    x_w2,
    model: LtiGmdp,
    labels: LabelMap,
    eps_w: float,
    d_w,
    n_interp: int = DEFAULT_INTERP_POINTS,
) -> bool:
    """Swept-tube label check: at most two letters and at most one change.

    The segment is sampled at ``n_interp`` points and the tube radius is
    inflated by one sampling-step bound, so a rejection may be conservative
    but an acceptance never misses a label excursion.
    """
    d_w = _dw_scalar(d_w)
    x_a = np.asarray(x_w, dtype=float)
    x_b = np.asarray(x_w2, dtype=float)
    ts = np.linspace(0.0, 1.0, n_interp)
    pts = x_a[None, :] + ts[:, None] * (x_b - x_a)[None, :]
    step = np.sqrt(d_w) * np.linalg.norm(x_b - x_a) / max(n_interp - 1, 1)
    semi = _output_semiaxes(model, eps_w + step, d_w)
    may, must = _region_flags(model, labels, pts, semi)
    ok_a, letter_a = _points_well_posed(x_a[None, :], model, labels, eps_w, d_w)
    ok_b, letter_b = _points_well_posed(x_b[None, :], model, labels, eps_w, d_w)
    if not (ok_a[0] and ok_b[0]):
        return False
    la, lb = int(letter_a[0]), int(letter_b[0])
    return bool(_edge_sequence_ok(may, must, la, lb))


def _popcount(arr: np.ndarray) -> np.ndarray:
    out = np.zeros_like(arr)
    work = arr.copy()
    while np.any(work):
        out += work & 1
        work >>= 1
    return out


def _edge_sequence_ok(may, must, letter_a, letter_b) -> bool:
    """Achievable letters stay within {letter_a, letter_b}, one monotone change.

    A letter L is achievable at a sample iff must <= L <= may bitwise, so more
    than one undecided region bit already means more than two letters.
    """
    if np.any(_popcount(may & ~must) > 1):
        return False
    ok_lo = (must == letter_a) | (must == letter_b)
    ok_hi = (may == letter_a) | (may == letter_b)
    if np.any(~(ok_lo & ok_hi)):
        return False
    if letter_a == letter_b:
        return bool(np.all(may == letter_a) and np.all(must == letter_a))
    can_a = (must == letter_a) | (may == letter_a)
    can_b = (must == letter_b) | (may == letter_b)
    # the source letter may only disappear once; the target letter may only
    # appear once -- together this caps the tube at a single label handoff
    if np.any(~can_a[:-1] & can_a[1:]):
        return False
    if np.any(can_b[:-1] & ~can_b[1:]):
        return False
    return True


def _steering_matrix(model: LtiGmdp, n_s: int):
    """Stacked reachability matrix [A^(n_s-1)B ... B] and the drift A^n_s."""
    blocks = []
    power = np.eye(model.n_x)
    for _ in range(n_s):
        blocks.insert(0, power @ model.B)
        power = power @ model.A
    return np.hstack(blocks), power


def _tarjan_sccs(n: int, succ) -> list:
    """Iterative Tarjan; returns the list of strongly connected components."""
    index = [-1] * n
    lowlink = [0] * n
    on_stack = [False] * n
    stack = []
    sccs = []
    counter = [0]
    for root in range(n):
        if index[root] != -1:
            continue
        work = [(root, 0)]
        while work:
            node, pi = work[-1]
            if pi == 0:
                index[node] = lowlink[node] = counter[0]
                counter[0] += 1
                stack.append(node)
                on_stack[node] = True
            advanced = False
            targets = succ[node]
            while pi < len(targets):
                nxt = targets[pi]
                pi += 1
                if index[nxt] == -1:
                    work[-1] = (node, pi)
                    work.append((nxt, 0))
                    advanced = True
                    break
                if on_stack[nxt]:
                    lowlink[node] = min(lowlink[node], index[nxt])
            if advanced:
                continue
            work[-1] = (node, pi)
            if pi >= len(targets):
                work.pop()
                if work:
                    parent = work[-1][0]
                    lowlink[parent] = min(lowlink[parent], lowlink[node])
                if lowlink[node] == index[node]:
                    comp = []
                    while True:
                        v = stack.pop()
                        on_stack[v] = False
                        comp.append(v)
                        if v == node:
                            break
                    sccs.append(sorted(comp))
    return sccs


def strongly_connected(model: WaypointModel) -> bool:
    """Whole-graph strong connectivity (single node counts as connected)."""
    n = model.n_waypoints
    if n == 0:
        return False
    if n == 1:
        return True
    sccs = _tarjan_sccs(n, model.adjacency())
    return len(sccs) == 1


def _feasible_edges(points, model, n_s, shrunk_box: Box):
    """Pairs steerable in n_s nominal steps within the shrunk input box."""
    g_mat, a_pow = _steering_matrix(model, n_s)
    pinv = np.linalg.pinv(g_mat)
    n = points.shape[0]
    src = np.repeat(np.arange(n), n)
    dst = np.tile(np.arange(n), n)
    d_vec = points[dst] - points[src] @ a_pow.T
    u_stack = d_vec @ pinv.T
    residual = np.abs(u_stack @ g_mat.T - d_vec).max(axis=1)
    reachable = residual <= 1e-9 * np.maximum(1.0, np.abs(d_vec).max(axis=1))
    n_u = model.n_u
    u_steps = u_stack.reshape(n * n, n_s, n_u)
    inside = np.all(
        (u_steps >= shrunk_box.lows) & (u_steps <= shrunk_box.highs), axis=(1, 2)
    )
    ok = reachable & inside
    return src[ok], dst[ok], u_steps[ok]


def _tube_ok_batch(points, src, dst, model, labels, eps_w, d_w, letters, n_interp):
    """Vectorized edge label check, same semantics as is_well_posed_edge."""
    if src.size == 0:
        return np.zeros(0, dtype=bool)
    x_a = points[src]
    x_b = points[dst]
    ts = np.linspace(0.0, 1.0, n_interp)
    samples = x_a[:, None, :] + ts[None, :, None] * (x_b - x_a)[:, None, :]
    flat = samples.reshape(-1, points.shape[1])
    steps = np.sqrt(d_w) * np.linalg.norm(x_b - x_a, axis=1) / max(n_interp - 1, 1)
    unit_semi = _output_semiaxes(model, 1.0, d_w)
    semi_flat = np.repeat((eps_w + steps)[:, None] * unit_semi[None, :], n_interp, axis=0)
    outputs = flat @ model.C.T
    may = np.zeros(outputs.shape[0], dtype=np.int64)
    must = np.zeros(outputs.shape[0], dtype=np.int64)
    for bit, region in enumerate(labels.regions):
        gap = np.maximum(region.box.lows - outputs, 0.0) + np.maximum(
            outputs - region.box.highs, 0.0
        )
        hit = np.sum((gap / semi_flat) ** 2, axis=1) <= 1.0
        inside = np.all(
            (outputs - semi_flat >= region.box.lows)
            & (outputs + semi_flat <= region.box.highs),
            axis=1,
        )
        may |= hit.astype(np.int64) << bit
        must |= inside.astype(np.int64) << bit
    may = may.reshape(src.size, n_interp)
    must = must.reshape(src.size, n_interp)
    ok = np.zeros(src.size, dtype=bool)
    for e in range(src.size):
        ok[e] = _edge_sequence_ok(
            may[e], must[e], int(letters[src[e]]), int(letters[dst[e]])
        )
    return ok


def build_waypoint_model(
    model: LtiGmdp,
    labels: LabelMap,
    sample_count: int,
    n_s: int,
    delta_w: float,
    K,
    d_w,
    rng_seed: int,
    augment_rounds: int = DEFAULT_AUGMENT_ROUNDS,
    n_interp: int = DEFAULT_INTERP_POINTS,
    force_region_coverage: bool = True,
    region_tries: int = 200,
) -> WaypointModel:
    """Sample, filter, and connect waypoints per the roadmap construction.

    Deterministic for a fixed seed. When the augmentation cap is reached
    without whole-graph strong connectivity, raises ``PartialModelError``
    carrying the model restricted to the largest strongly connected component.
    """
    if sample_count < 1:
        raise ContractError("sample_count must be >= 1")
    d_w = _dw_scalar(d_w)
    K = np.atleast_2d(np.asarray(K, dtype=float))
    eps = epsilon_w(model, K, d_w, delta_w)
    margin = float(np.linalg.norm(K, 2)) * eps / np.sqrt(d_w)
    half_widths = 0.5 * model.input_box.widths
    if np.any(margin >= half_widths):
        raise ConfigurationError(
            f"feedback margin ||K|| eps_w = {margin:.6g} swallows the input box "
            f"(half-widths {half_widths.tolist()}); no nominal steering is possible"
        )
    shrunk_box = model.input_box.shrink(margin)
    rng = np.random.default_rng(rng_seed)
    box = model.state_box
    points = []
    if force_region_coverage:
        for region in labels.regions:
            lo = np.maximum(region.box.lows, box.lows)
            hi = np.minimum(region.box.highs, box.highs)
            if np.any(lo >= hi):
                continue
            for _ in range(region_tries):
                cand = rng.uniform(lo, hi)
                if is_well_posed_point(cand, eps, d_w, labels, model):
                    points.append(cand)
                    break
    def draw(count):
        cand = rng.uniform(box.lows, box.highs, size=(count, box.dim))
        keep, _ = _points_well_posed(cand, model, labels, eps, d_w)
        return [c for c, k in zip(cand, keep) if k]

    points.extend(draw(sample_count))
    candidate = None
    rounds = 0
    while True:
        pts = np.asarray(points, dtype=float).reshape(-1, box.dim)
        if pts.shape[0] > 0:
            _, letters_must = _points_well_posed(pts, model, labels, eps, d_w)
            src, dst, u_steps = _feasible_edges(pts, model, n_s, shrunk_box)
            tube_ok = _tube_ok_batch(
                pts, src, dst, model, labels, eps, d_w, letters_must, n_interp
            )
            src, dst, u_steps = src[tube_ok], dst[tube_ok], u_steps[tube_ok]
            order = np.lexsort((dst, src))
            candidate = WaypointModel(
                points=pts,
                edge_list=tuple((int(src[k]), int(dst[k])) for k in order),
                edge_inputs=tuple(u_steps[k] for k in order),
                letters=letters_must,
                eps_w=eps,
                d_w=d_w,
                K=K,
                n_s=n_s,
                delta_w=delta_w,
                initial=None,
            )
            if strongly_connected(candidate):
                return _with_initial(candidate, model)
        if rounds >= augment_rounds:
            break
        rounds += 1
        points.extend(draw(max(8, sample_count // 4)))
    partial = _largest_scc_model(candidate, model) if candidate is not None else None
    n_pts = candidate.n_waypoints if candidate is not None else 0
    n_edges = len(candidate.edge_list) if candidate is not None else 0
    raise PartialModelError(
        f"augmentation cap ({augment_rounds} rounds) reached without strong "
        f"connectivity: {n_pts} waypoints, {n_edges} edges",
        partial_model=partial,
        diagnostics={
            "waypoints": n_pts,
            "edges": n_edges,
            "eps_w": eps,
            "input_margin": margin,
            "largest_scc": partial.n_waypoints if partial is not None else 0,
        },
    )


def _with_initial(wm: WaypointModel, model: LtiGmdp) -> WaypointModel:
    inside = wm.containing(model.x0)
    initial = inside[0] if inside else None
    return WaypointModel(
        points=wm.points,
        edge_list=wm.edge_list,
        edge_inputs=wm.edge_inputs,
        letters=wm.letters,
        eps_w=wm.eps_w,
        d_w=wm.d_w,
        K=wm.K,
        n_s=wm.n_s,
        delta_w=wm.delta_w,
        initial=initial,
    )


def _largest_scc_model(wm: WaypointModel, model: LtiGmdp) -> WaypointModel:
    sccs = _tarjan_sccs(wm.n_waypoints, wm.adjacency())
    best = max(sccs, key=lambda c: (len(c), -min(c)))
    keep = sorted(best)
    remap = {old: new for new, old in enumerate(keep)}
    edges = []
    inputs = []
    for (src, dst), u in zip(wm.edge_list, wm.edge_inputs):
        if src in remap and dst in remap:
            edges.append((remap[src], remap[dst]))
            inputs.append(u)
    order = sorted(range(len(edges)), key=lambda k: edges[k])
    reduced = WaypointModel(
        points=wm.points[keep],
        edge_list=tuple(edges[k] for k in order),
        edge_inputs=tuple(inputs[k] for k in order),
        letters=wm.letters[keep],
        eps_w=wm.eps_w,
        d_w=wm.d_w,
        K=wm.K,
        n_s=wm.n_s,
        delta_w=wm.delta_w,
        initial=None,
    )
    return _with_initial(reduced, model)
