"""DFA compilation from scLTL via formula progression, plus stepping and I/O.

Letters are bitmasks over the proposition declaration order and the alphabet
is the full power set. Compilation expands until/next obligations one letter
at a time; canonical formula construction keeps the expansion deterministic,
and Moore partition refinement minimizes the result.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, TextIO, Tuple

import numpy as np

from .errors import ContractError, ResourceError
from .scltl import (
    And,
    Atom,
    FalseNode,
    Next,
    Node,
    NotAtom,
    Or,
    TrueNode,
    Until,
    atoms_of,
)

DEFAULT_STATE_CAP = 10_000


@dataclass(frozen=True)
class Dfa:
    """Complete deterministic automaton over letters 0 .. 2^n_props - 1."""

    n_states: int
    q0: int
    accepting: frozenset
    transitions: np.ndarray
    props: Tuple[str, ...]
    sink: Optional[int] = None

    def __post_init__(self):
        trans = np.asarray(self.transitions, dtype=np.int64)
        if trans.shape != (self.n_states, 2 ** len(self.props)):
            raise ContractError(
                f"transition table shape {trans.shape} does not match "
                f"{self.n_states} states x {2 ** len(self.props)} letters"
            )
        if not ((trans >= 0) & (trans < self.n_states)).all():
            raise ContractError("transition targets out of range")
        for q in self.accepting:
            if not (trans[q] == trans[q][0]).all() or trans[q][0] not in self.accepting:
                raise ContractError("accepting states must be absorbing")
        object.__setattr__(self, "transitions", trans)
        object.__setattr__(self, "accepting", frozenset(int(q) for q in self.accepting))

    @property
    def n_letters(self) -> int:
        return 2 ** len(self.props)

    def is_accepting(self, q: int) -> bool:
        return q in self.accepting

    def accepting_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.accepting)] = True
        return mask


def dfa_step(dfa: Dfa, q: int, letter: int) -> int:
    """Total deterministic transition."""
    if not (0 <= q < dfa.n_states):
        raise ContractError(f"state {q} out of range")
    return int(dfa.transitions[q, letter])


def accepts(dfa: Dfa, word: Sequence[int]) -> bool:
    """True iff some prefix of the word drives q0 into the accepting set."""
    q = dfa.q0
    if q in dfa.accepting:
        return True
    for letter in word:
        q = int(dfa.transitions[q, int(letter)])
        if q in dfa.accepting:
            return True
    return False


# DFA states are obligations in disjunctive normal form: a frozenset of
# clauses, each clause a frozenset of pending subformulas of the original
# formula (evaluated against future letters). The literal space is finite, so
# progression closes over a finite, canonical state space; clause absorption
# keeps the forms small.

DNF_TRUE = frozenset({frozenset()})
DNF_FALSE = frozenset()


def _dnf_or(*parts):
    clauses = set()
    for part in parts:
        if part == DNF_TRUE:
            return DNF_TRUE
        clauses |= part
    # absorption: drop clauses that are supersets of another clause
    kept = []
    for clause in sorted(clauses, key=len):
        if not any(other <= clause for other in kept):
            kept.append(clause)
    return frozenset(kept)


def _dnf_and(left, right):
    if left == DNF_FALSE or right == DNF_FALSE:
        return DNF_FALSE
    return _dnf_or(
        *[frozenset({c1 | c2}) for c1 in left for c2 in right]
    )


def _progress(node: Node, letter_names: frozenset):
    """DNF of the obligation remaining after evaluating one letter."""
    if isinstance(node, TrueNode):
        return DNF_TRUE
    if isinstance(node, FalseNode):
        return DNF_FALSE
    if isinstance(node, Atom):
        return DNF_TRUE if node.name in letter_names else DNF_FALSE
    if isinstance(node, NotAtom):
        return DNF_FALSE if node.name in letter_names else DNF_TRUE
    if isinstance(node, And):
        out = DNF_TRUE
        for arg in node.args:
            out = _dnf_and(out, _progress(arg, letter_names))
        return out
    if isinstance(node, Or):
        return _dnf_or(*(_progress(a, letter_names) for a in node.args))
    if isinstance(node, Next):
        return frozenset({frozenset({node.sub})})
    if isinstance(node, Until):
        done = _progress(node.rhs, letter_names)
        hold = _progress(node.lhs, letter_names)
        keep = _dnf_and(hold, frozenset({frozenset({node})}))
        return _dnf_or(done, keep)
    raise ContractError(f"unknown AST node {node!r}")


def _progress_state(state, letter_names: frozenset):
    """Progress a DNF state: for each clause, all pending literals must hold."""
    out = DNF_FALSE
    for clause in state:
        acc = DNF_TRUE
        for literal in clause:
            acc = _dnf_and(acc, _progress(literal, letter_names))
            if acc == DNF_FALSE:
                break
        out = _dnf_or(out, acc)
        if out == DNF_TRUE:
            return DNF_TRUE
    return out


def _state_key(state):
    return tuple(
        sorted(tuple(sorted(lit.key() for lit in clause)) for clause in state)
    )


def _minimize(n_states, q0, accepting, trans):
    """Moore partition refinement; returns the renumbered quotient automaton."""
    n_letters = trans.shape[1]
    block = np.array([1 if q in accepting else 0 for q in range(n_states)])
    while True:
        signature = {}
        new_block = np.empty_like(block)
        for q in range(n_states):
            sig = (block[q], tuple(block[trans[q, a]] for a in range(n_letters)))
            new_block[q] = signature.setdefault(sig, len(signature))
        if len(signature) == len(set(block.tolist())):
            block = new_block
            break
        block = new_block
    n_blocks = len(set(block.tolist()))
    # renumber blocks in BFS order from the initial block for a stable layout
    order = {}
    queue = [block[q0]]
    order[block[q0]] = 0
    head = 0
    while head < len(queue):
        b = queue[head]
        head += 1
        rep = int(np.argmax(block == b))
        for a in range(n_letters):
            nb = block[trans[rep, a]]
            if nb not in order:
                order[nb] = len(order)
                queue.append(nb)
    for b in range(n_blocks):
        if b not in order:
            order[b] = len(order)
    new_trans = np.zeros((n_blocks, n_letters), dtype=np.int64)
    for q in range(n_states):
        for a in range(n_letters):
            new_trans[order[block[q]], a] = order[block[trans[q, a]]]
    new_accepting = frozenset(order[block[q]] for q in accepting)
    return n_blocks, order[block[q0]], new_accepting, new_trans


def to_dfa(ast: Node, ap, state_cap: int = DEFAULT_STATE_CAP) -> Dfa:
    """Compile an scLTL AST into the minimal DFA of its good prefixes."""
    props = tuple(ap)
    unknown = atoms_of(ast) - set(props)
    if unknown:
        raise ContractError(f"formula uses undeclared propositions {sorted(unknown)}")
    n_letters = 2 ** len(props)
    letters_names = [
        frozenset(p for bit, p in enumerate(props) if letter & (1 << bit))
        for letter in range(n_letters)
    ]
    initial = frozenset({frozenset({ast})})
    states = {_state_key(initial): 0}
    dnfs = [initial]
    trans_rows = {}
    frontier = [0]
    while frontier:
        qi = frontier.pop(0)
        row = np.zeros(n_letters, dtype=np.int64)
        for letter in range(n_letters):
            succ = _progress_state(dnfs[qi], letters_names[letter])
            key = _state_key(succ)
            if key not in states:
                if len(states) >= state_cap:
                    raise ResourceError(
                        f"DFA construction exceeded the state cap of {state_cap}"
                    )
                states[key] = len(dnfs)
                dnfs.append(succ)
                frontier.append(states[key])
            row[letter] = states[key]
        trans_rows[qi] = row
    trans = np.vstack([trans_rows[q] for q in range(len(dnfs))])
    accepting = frozenset(i for i, f in enumerate(dnfs) if f == DNF_TRUE)
    n_states, q0, accepting, trans = _minimize(len(dnfs), 0, accepting, trans)
    # the unique rejecting absorbing state with no path to acceptance, if any
    reach_acc = np.zeros(n_states, dtype=bool)
    reach_acc[list(accepting)] = True
    changed = True
    while changed:
        changed = False
        for q in range(n_states):
            if not reach_acc[q] and reach_acc[trans[q]].any():
                reach_acc[q] = True
                changed = True
    dead = [q for q in range(n_states) if not reach_acc[q]]
    sink = dead[0] if len(dead) == 1 else None
    return Dfa(
        n_states=n_states,
        q0=q0,
        accepting=accepting,
        transitions=trans,
        props=props,
        sink=sink,
    )


def write_dfa(dfa: Dfa, stream: TextIO) -> None:
    """Plain-text table: header block then one transition per line."""
    stream.write(f"states {dfa.n_states}\n")
    stream.write(f"initial {dfa.q0}\n")
    stream.write("accepting " + " ".join(str(q) for q in sorted(dfa.accepting)) + "\n")
    stream.write(f"sink {dfa.sink if dfa.sink is not None else '-'}\n")
    stream.write("props " + " ".join(dfa.props) + "\n")
    for q in range(dfa.n_states):
        for letter in range(dfa.n_letters):
            stream.write(f"{q} {letter} {int(dfa.transitions[q, letter])}\n")


def read_dfa(stream: TextIO) -> Dfa:
    """Inverse of :func:`write_dfa`."""
    header = {}
    transitions = []
    for raw in stream:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] in ("states", "initial", "accepting", "sink", "props"):
            header[parts[0]] = parts[1:]
        else:
            if len(parts) != 3:
                raise ContractError(f"malformed transition line {line!r}")
            transitions.append(tuple(int(v) for v in parts))
    try:
        n_states = int(header["states"][0])
        q0 = int(header["initial"][0])
        accepting = frozenset(int(v) for v in header.get("accepting", []))
        props = tuple(header.get("props", []))
        sink_field = header["sink"][0] if header.get("sink") else "-"
        sink = None if sink_field == "-" else int(sink_field)
    except (KeyError, IndexError, ValueError) as exc:
        raise ContractError(f"malformed DFA header: {exc}") from exc
    n_letters = 2 ** len(props)
    trans = np.full((n_states, n_letters), -1, dtype=np.int64)
    for q, letter, nxt in transitions:
        trans[q, letter] = nxt
    if (trans < 0).any():
        raise ContractError("DFA table is not total: missing transitions")
    return Dfa(
        n_states=n_states,
        q0=q0,
        accepting=accepting,
        transitions=trans,
        props=props,
        sink=sink,
    )
