"""Ambiguous-successor sets: DFA states reachable under output deviation.

For a cell with representative output y, any concrete output within the
weighted ellipsoid of radius eps around y may carry a different letter. The
achievable letters are derived from exact ellipsoid-rectangle intersection
and containment tests per labeled region; the resulting set may only
over-approximate the truth (more letters means a smaller minimum in the
robust backup, hence still a valid lower bound).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .errors import ConfigurationError, ContractError
from .geometry import (
    ellipsoid_semiaxes,
    ellipsoids_inside_box,
    ellipsoids_intersect_box,
)
from .dfa import Dfa
from .grid import GridAbstraction
from .model import LabelMap, LtiGmdp


def _output_semiaxes(eps: float, d_matrix: np.ndarray, allow_bbox: bool) -> np.ndarray:
    d_matrix = np.atleast_2d(np.asarray(d_matrix, dtype=float))
    if np.allclose(d_matrix, np.diag(np.diag(d_matrix))):
        return ellipsoid_semiaxes(eps, np.diag(d_matrix))
    if not allow_bbox:
        raise ConfigurationError(
            "non-diagonal weighting matrix needs the bounding-box fallback enabled"
        )
    inv = np.linalg.inv(d_matrix)
    return eps * np.sqrt(np.diag(inv))


def letters_from_masks(may_mask: int, must_mask: int) -> Tuple[int, ...]:
    """All letters between the must set and the may set, sorted ascending."""
    free = may_mask & ~must_mask
    bits = [b for b in range(free.bit_length()) if free & (1 << b)]
    letters = []
    for pick in range(1 << len(bits)):
        mask = must_mask
        for k, b in enumerate(bits):
            if pick & (1 << k):
                mask |= 1 << b
        letters.append(mask)
    return tuple(sorted(set(letters)))


def achievable_letters(
    center: np.ndarray, eps: float, d_matrix: np.ndarray, labels: LabelMap,
    allow_bbox: bool = False,
) -> Tuple[int, ...]:
    """Letters achievable by outputs in the ellipsoid around ``center``."""
    semi = _output_semiaxes(eps, d_matrix, allow_bbox)
    center = np.atleast_2d(np.asarray(center, dtype=float))
    may = 0
    must = 0
    for bit, region in enumerate(labels.regions):
        if bool(ellipsoids_intersect_box(center, semi, region.box)[0]):
            may |= 1 << bit
        if bool(ellipsoids_inside_box(center, semi, region.box)[0]):
            must |= 1 << bit
    return letters_from_masks(may, must)


def qeps_plus(
    grid: GridAbstraction,
    dfa: Dfa,
    labels: LabelMap,
    q: int,
    cell: int,
    eps: float,
    d_matrix: np.ndarray,
    model: LtiGmdp = None,
    allow_bbox: bool = False,
) -> frozenset:
    """DFA successors of q achievable by outputs within eps of the cell output."""
    if not (0 <= q < dfa.n_states):
        raise ContractError(f"DFA state {q} out of range")
    rep = grid.rep(cell)
    y = rep if model is None else model.C @ rep
    letters = achievable_letters(y, eps, d_matrix, labels, allow_bbox)
    return frozenset(int(dfa.transitions[q, letter]) for letter in letters)


class QepsTable:
    """Precomputed letter ambiguity per (cell, layer) with DFA successor lookup.

    Cells are grouped by their achievable-letter set so that the robust
    minimum over successors vectorizes per group during value iteration.
    """

    def __init__(
        self,
        grid: GridAbstraction,
        dfa: Dfa,
        labels: LabelMap,
        model: LtiGmdp,
        eps_list,
        d_matrix: np.ndarray,
        allow_bbox: bool = False,
    ):
        self.grid = grid
        self.dfa = dfa
        self.labels = labels
        self.eps_list = [float(e) for e in eps_list]
        self.d_matrix = np.asarray(d_matrix, dtype=float)
        reps = grid.reps_array()
        outputs = reps @ model.C.T
        self.rep_letters = labels.letters_of_points(outputs)
        self.letter_sets: List[Tuple[int, ...]] = []
        self._set_ids: Dict[Tuple[int, ...], int] = {}
        self.cell_set_id = np.zeros((grid.n_cells, len(self.eps_list)), dtype=np.int64)
        for j, eps in enumerate(self.eps_list):
            semi = _output_semiaxes(eps, self.d_matrix, allow_bbox)
            may = np.zeros(grid.n_cells, dtype=np.int64)
            must = np.zeros(grid.n_cells, dtype=np.int64)
            for bit, region in enumerate(labels.regions):
                may |= ellipsoids_intersect_box(outputs, semi, region.box).astype(
                    np.int64
                ) << bit
                must |= ellipsoids_inside_box(outputs, semi, region.box).astype(
                    np.int64
                ) << bit
            pair = may * (2 ** labels.n_props) + must
            uniq, inverse = np.unique(pair, return_inverse=True)
            ids = np.empty(uniq.size, dtype=np.int64)
            for k, code in enumerate(uniq):
                may_mask = int(code) // (2 ** labels.n_props)
                must_mask = int(code) % (2 ** labels.n_props)
                letters = letters_from_masks(may_mask, must_mask)
                ids[k] = self._intern(letters)
            self.cell_set_id[:, j] = ids[inverse]
        # cache cell groups per (layer, set id) for the vectorized min
        self._groups: List[List[np.ndarray]] = []
        for j in range(len(self.eps_list)):
            per_set = []
            for sid in range(len(self.letter_sets)):
                per_set.append(np.nonzero(self.cell_set_id[:, j] == sid)[0])
            self._groups.append(per_set)

    def _intern(self, letters: Tuple[int, ...]) -> int:
        if letters not in self._set_ids:
            self._set_ids[letters] = len(self.letter_sets)
            self.letter_sets.append(letters)
        return self._set_ids[letters]

    def successors(self, q: int, cell: int, j: int) -> frozenset:
        letters = self.letter_sets[self.cell_set_id[cell, j]]
        return frozenset(int(self.dfa.transitions[q, lt]) for lt in letters)

    def w_min(self, q: int, j: int, values_j: np.ndarray, acc_mask: np.ndarray) -> np.ndarray:
        """W[c+] = min over ambiguous successors of max(accept, V[c+, q+]).

        ``values_j`` is (n_cells, n_q) for the target layer.
        """
        w = np.empty(self.grid.n_cells)
        trans = self.dfa.transitions
        for sid, cells in enumerate(self._groups[j]):
            if cells.size == 0:
                continue
            qplus = sorted({int(trans[q, lt]) for lt in self.letter_sets[sid]})
            best = None
            for qp in qplus:
                cand = np.maximum(1.0 if acc_mask[qp] else 0.0, values_j[cells, qp])
                best = cand if best is None else np.minimum(best, cand)
            w[cells] = best
        return w
