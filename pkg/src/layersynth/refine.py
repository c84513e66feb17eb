"""Controller refinement onto the concrete model and Monte-Carlo validation.

The refined controller keeps an abstract memory (cell + layer, or waypoint +
edge progress) alongside the DFA state. The gridded branch tracks the cell of
the measured state directly; the waypoint branch replays the edge's nominal
inputs with the tracking correction K (x - x_nominal). Leaving the relation
is the deviation-budgeted event: it is recorded, never raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .dfa import Dfa
from .dp import NO_TARGET, SynthesisResult
from .errors import ContractError
from .grid import project
from .model import LabelMap, LtiGmdp, Trace, step


@dataclass
class _Memory:
    q: int
    branch: str  # "db", "df", or "dead"
    cell: int = NO_TARGET
    layer: int = 0
    wp: int = NO_TARGET
    edge_dst: int = NO_TARGET
    edge_inputs: Optional[np.ndarray] = None
    edge_nominal: Optional[np.ndarray] = None
    edge_step: int = 0
    accepted: bool = False
    failed: bool = False
    relation_exits: int = 0


class RefinedController:
    """Stateful deployment of a synthesized policy on the concrete model."""

    def __init__(
        self,
        model: LtiGmdp,
        dfa: Dfa,
        labels: LabelMap,
        result: SynthesisResult,
        safe_input=None,
    ):
        self.model = model
        self.dfa = dfa
        self.labels = labels
        self.result = result
        self.safe_input = (
            model.input_box.center if safe_input is None else np.asarray(safe_input, float)
        )
        self.memory: Optional[_Memory] = None
        self._started = False

    # -- memory handling ---------------------------------------------------

    def reset(self, x0) -> None:
        x0 = np.asarray(x0, dtype=float)
        letter = self.labels.letter(self.model.C @ x0)
        q = int(self.dfa.transitions[self.dfa.q0, letter])
        mem = _Memory(q=q, branch="dead")
        mem.accepted = self.dfa.is_accepting(q)
        best = -np.inf
        res = self.result
        if res.grid is not None:
            cell = project(res.grid, x0)
            if cell != res.grid.sink_index:
                vals = res.values.db[cell, q, :]
                layer = int(np.argmax(vals))
                if float(vals[layer]) > best:
                    best = float(vals[layer])
                    mem.branch = "db"
                    mem.cell = cell
                    mem.layer = layer
        if res.waypoints is not None:
            for w in res.waypoints.containing(x0):
                val = float(res.values.df[w, q])
                if val > best:
                    best = val
                    mem.branch = "df"
                    mem.wp = int(w)
                    mem.edge_dst = NO_TARGET
        if mem.branch == "dead" and not mem.accepted:
            mem.failed = True
        self.memory = mem
        self._started = False

    # -- stepping ----------------------------------------------------------

    def _clamp(self, u: np.ndarray) -> np.ndarray:
        box = self.model.input_box
        return np.minimum(np.maximum(u, box.lows), box.highs)

    def _db_input(self, x: np.ndarray, mem: _Memory) -> np.ndarray:
        res = self.result
        policy = res.policy
        if policy.bf_target is not None:
            w = int(policy.bf_target[mem.cell, mem.q, mem.layer])
            if w != NO_TARGET:
                mem.branch = "df"
                mem.wp = w
                mem.edge_dst = NO_TARGET
                return self._df_input(x, mem)
        u_idx = int(policy.input_idx[mem.cell, mem.q, mem.layer])
        if u_idx == NO_TARGET:
            mem.branch = "dead"
            mem.failed = True
            return self.safe_input.copy()
        u = res.grid.input_vector(u_idx)
        gain = res.layers.interface_gain if res.layers is not None else None
        if gain is not None:
            u = u + gain @ (x - res.grid.rep(mem.cell))
        mem.layer = int(policy.switch_layer[mem.cell, mem.q, mem.layer])
        return self._clamp(u)

    def _begin_edge(self, mem: _Memory) -> bool:
        res = self.result
        wps = res.waypoints
        succ = int(res.policy.df_succ[mem.wp, mem.q])
        if succ == NO_TARGET:
            return False
        key = (mem.wp, succ)
        try:
            edge_pos = wps.edge_index()[key]
        except KeyError:
            return False
        u_seq = wps.edge_inputs[edge_pos]
        nominal = np.empty((wps.n_s + 1, self.model.n_x))
        nominal[0] = wps.points[mem.wp]
        for k in range(wps.n_s):
            nominal[k + 1] = self.model.A @ nominal[k] + self.model.B @ u_seq[k]
        mem.edge_dst = succ
        mem.edge_inputs = u_seq
        mem.edge_nominal = nominal
        mem.edge_step = 0
        return True

    def _df_input(self, x: np.ndarray, mem: _Memory) -> np.ndarray:
        res = self.result
        wps = res.waypoints
        if mem.edge_dst == NO_TARGET:
            fb = res.policy.df_fb_layer
            if fb is not None and int(fb[mem.wp, mem.q]) != NO_TARGET:
                cell = project(res.grid, x)
                if cell != res.grid.sink_index:
                    mem.branch = "db"
                    mem.cell = cell
                    mem.layer = int(fb[mem.wp, mem.q])
                    return self._db_input(x, mem)
                mem.relation_exits += 1
            if not self._begin_edge(mem):
                mem.branch = "dead"
                mem.failed = True
                return self.safe_input.copy()
        k = mem.edge_step
        x_nom = mem.edge_nominal[k]
        err = x - x_nom
        if wps.d_w * float(err @ err) > wps.eps_w**2 + 1e-12:
            mem.relation_exits += 1
        u = mem.edge_inputs[k] + wps.K @ err
        mem.edge_step += 1
        if mem.edge_step >= wps.n_s:
            mem.wp = mem.edge_dst
            mem.edge_dst = NO_TARGET
            mem.edge_inputs = None
            mem.edge_nominal = None
            mem.edge_step = 0
        return self._clamp(u)

    def step(self, x) -> np.ndarray:
        """Observe the measured state, advance the memory, return the input."""
        if self.memory is None:
            raise ContractError("controller must be reset with an initial state")
        x = np.asarray(x, dtype=float)
        mem = self.memory
        if self._started:
            letter = self.labels.letter(self.model.C @ x)
            mem.q = int(self.dfa.transitions[mem.q, letter])
            if self.dfa.is_accepting(mem.q):
                mem.accepted = True
        self._started = True
        if self.dfa.sink is not None and mem.q == self.dfa.sink:
            mem.failed = True
            return self.safe_input.copy()
        if mem.branch == "db":
            cell = project(self.result.grid, x)
            if cell == self.result.grid.sink_index:
                mem.relation_exits += 1
                mem.branch = "dead"
                mem.failed = True
                return self.safe_input.copy()
            mem.cell = cell
            return self._db_input(x, mem)
        if mem.branch == "df":
            return self._df_input(x, mem)
        mem.failed = True
        return self.safe_input.copy()

    @property
    def accepted(self) -> bool:
        return self.memory is not None and self.memory.accepted

    @property
    def failed(self) -> bool:
        return self.memory is not None and self.memory.failed


def control_step(controller: RefinedController, x) -> np.ndarray:
    """Input for the measured state; advances the controller memory."""
    return controller.step(x)


def simulate_trace(
    model: LtiGmdp,
    controller: RefinedController,
    dfa: Dfa,
    labels: LabelMap,
    x0,
    horizon: int,
    rng: np.random.Generator,
) -> Trace:
    """One closed-loop rollout with fresh Gaussian noise."""
    x = np.asarray(x0, dtype=float)
    controller.reset(x)
    states = [x.copy()]
    inputs = []
    letters = [labels.letter(model.C @ x)]
    dfa_states = [controller.memory.q]
    for _ in range(horizon):
        u = controller.step(x)
        w = model.sample_noise(rng, 1)[0]
        x = step(model, x, u, w)
        states.append(x.copy())
        inputs.append(np.asarray(u, dtype=float))
        letters.append(labels.letter(model.C @ x))
        dfa_states.append(int(dfa.transitions[dfa_states[-1], letters[-1]]))
        if controller.accepted:
            break
    # consume the final letter so acceptance at the last state counts
    if not controller.accepted:
        controller.step(x)
    return Trace(
        states=np.asarray(states),
        inputs=np.asarray(inputs).reshape(len(inputs), model.n_u),
        letters=letters,
        satisfied=controller.accepted,
        dfa_states=tuple(dfa_states),
    )


def write_trace_csv(path, trace: Trace, model: LtiGmdp, labels: LabelMap) -> None:
    """Trace export: one row per time step with output, letter, and DFA state."""
    n_x, n_u, n_y = model.n_x, model.n_u, model.n_y
    header = (
        ["t"]
        + [f"x{d + 1}" for d in range(n_x)]
        + [f"u{d + 1}" for d in range(n_u)]
        + [f"y{d + 1}" for d in range(n_y)]
        + ["letter", "q"]
    )
    with open(path, "w", newline="") as handle:
        handle.write(",".join(header) + "\n")
        for t in range(len(trace.states)):
            x = trace.states[t]
            y = model.C @ x
            if t < len(trace.inputs):
                u_fields = [f"{v:.9g}" for v in trace.inputs[t]]
            else:
                u_fields = [""] * n_u
            q = trace.dfa_states[t] if t < len(trace.dfa_states) else ""
            row = (
                [str(t)]
                + [f"{v:.9g}" for v in x]
                + u_fields
                + [f"{v:.9g}" for v in y]
                + [labels.format_letter(trace.letters[t]), str(q)]
            )
            handle.write(",".join(row) + "\n")


def monte_carlo(
    model: LtiGmdp,
    controller: RefinedController,
    dfa: Dfa,
    labels: LabelMap,
    x0,
    runs: int,
    horizon: int,
    seed: int,
) -> Tuple[float, float]:
    """Empirical satisfaction frequency and 95% normal half-width.

    Deterministic for a fixed seed; each run draws fresh noise and stops early
    once the word is accepted or the DFA sink is reached.
    """
    if runs < 1 or horizon < 1:
        raise ContractError("runs and horizon must be >= 1")
    rng = np.random.default_rng(seed)
    a_mat, b_mat, bw_mat = model.A, model.B, model.Bw
    hits = 0
    x0 = np.asarray(x0, dtype=float)
    for _ in range(runs):
        controller.reset(x0)
        x = x0
        if controller.accepted:
            hits += 1
            continue
        mem = controller.memory
        for _ in range(horizon):
            u = controller.step(x)
            if mem.accepted:
                break
            if dfa.sink is not None and mem.q == dfa.sink:
                break
            w = model.sample_noise(rng, 1)[0]
            x = a_mat @ x + b_mat @ u + bw_mat @ w
        if not mem.accepted:
            controller.step(x)
        if mem.accepted:
            hits += 1
    p_hat = hits / runs
    half = 1.96 * np.sqrt(max(p_hat * (1.0 - p_hat), 0.0) / runs)
    return float(p_hat), float(half)
