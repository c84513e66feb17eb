"""Parser and AST for syntactically co-safe LTL formulas.

Grammar (lowest to highest precedence, until is right-associative):

    formula := disj ('U' formula)?
    disj    := conj ('|' conj)*
    conj    := unary ('&' unary)*
    unary   := '!' unary | 'X' unary | ident | '(' formula ')'

Negation is pushed to the atoms during parsing (De Morgan over & and |);
negation over a temporal operator has no co-safe reading and is rejected.
``X`` and ``U`` are reserved operator names.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Tuple

from .errors import ContractError


class ScltlSyntaxError(ContractError):
    """Malformed formula text; carries the character position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnknownPropositionError(ContractError):
    pass


@dataclass(frozen=True)
class Node:
    def key(self) -> tuple:
        raise NotImplementedError


@dataclass(frozen=True)
class TrueNode(Node):
    def key(self):
        return (0,)

    def __str__(self):
        return "true"


@dataclass(frozen=True)
class FalseNode(Node):
    def key(self):
        return (1,)

    def __str__(self):
        return "false"


@dataclass(frozen=True)
class Atom(Node):
    name: str

    def key(self):
        return (2, self.name)

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class NotAtom(Node):
    name: str

    def key(self):
        return (3, self.name)

    def __str__(self):
        return f"!{self.name}"


@dataclass(frozen=True)
class And(Node):
    args: Tuple[Node, ...]

    def key(self):
        return (4,) + tuple(a.key() for a in self.args)

    def __str__(self):
        return "(" + " & ".join(str(a) for a in self.args) + ")"


@dataclass(frozen=True)
class Or(Node):
    args: Tuple[Node, ...]

    def key(self):
        return (5,) + tuple(a.key() for a in self.args)

    def __str__(self):
        return "(" + " | ".join(str(a) for a in self.args) + ")"


@dataclass(frozen=True)
class Next(Node):
    sub: Node

    def key(self):
        return (6, self.sub.key())

    def __str__(self):
        return f"X {self.sub}"


@dataclass(frozen=True)
class Until(Node):
    lhs: Node
    rhs: Node

    def key(self):
        return (7, self.lhs.key(), self.rhs.key())

    def __str__(self):
        return f"({self.lhs} U {self.rhs})"


TRUE = TrueNode()
FALSE = FalseNode()


def make_and(*parts: Node) -> Node:
    """Canonical conjunction: flatten, sort, dedupe, fold constants."""
    flat = []
    for p in parts:
        if isinstance(p, FalseNode):
            return FALSE
        if isinstance(p, TrueNode):
            continue
        if isinstance(p, And):
            flat.extend(p.args)
        else:
            flat.append(p)
    seen = {}
    for p in flat:
        seen[p.key()] = p
    for p in list(seen.values()):
        if isinstance(p, Atom) and (3, p.name) in seen:
            return FALSE
    args = tuple(seen[k] for k in sorted(seen))
    if not args:
        return TRUE
    if len(args) == 1:
        return args[0]
    return And(args)


def make_or(*parts: Node) -> Node:
    """Canonical disjunction: flatten, sort, dedupe, fold constants."""
    flat = []
    for p in parts:
        if isinstance(p, TrueNode):
            return TRUE
        if isinstance(p, FalseNode):
            continue
        if isinstance(p, Or):
            flat.extend(p.args)
        else:
            flat.append(p)
    seen = {}
    for p in flat:
        seen[p.key()] = p
    for p in list(seen.values()):
        if isinstance(p, Atom) and (3, p.name) in seen:
            return TRUE
    args = tuple(seen[k] for k in sorted(seen))
    if not args:
        return FALSE
    if len(args) == 1:
        return args[0]
    return Or(args)


def negate(node: Node, position: int = 0) -> Node:
    """Push a negation inward; temporal operators underneath are rejected."""
    if isinstance(node, TrueNode):
        return FALSE
    if isinstance(node, FalseNode):
        return TRUE
    if isinstance(node, Atom):
        return NotAtom(node.name)
    if isinstance(node, NotAtom):
        return Atom(node.name)
    if isinstance(node, And):
        return make_or(*(negate(a, position) for a in node.args))
    if isinstance(node, Or):
        return make_and(*(negate(a, position) for a in node.args))
    raise ScltlSyntaxError(
        "negation over a temporal operator is not syntactically co-safe", position
    )


def atoms_of(node: Node) -> frozenset:
    if isinstance(node, (Atom, NotAtom)):
        return frozenset([node.name])
    if isinstance(node, (And, Or)):
        out = frozenset()
        for a in node.args:
            out |= atoms_of(a)
        return out
    if isinstance(node, Next):
        return atoms_of(node.sub)
    if isinstance(node, Until):
        return atoms_of(node.lhs) | atoms_of(node.rhs)
    return frozenset()


def contains_next(node: Node) -> bool:
    if isinstance(node, Next):
        return True
    if isinstance(node, (And, Or)):
        return any(contains_next(a) for a in node.args)
    if isinstance(node, Until):
        return contains_next(node.lhs) or contains_next(node.rhs)
    return False


_TOKEN_RE = re.compile(r"\s*(?:(\()|(\))|(!)|(&)|(\|)|([A-Za-z_][A-Za-z0-9_]*))")


class _Parser:
    def __init__(self, text: str, ap):
        self.text = text
        self.ap = set(ap)
        self.pos = 0
        self.tokens = []
        self._tokenize()
        self.idx = 0

    def _tokenize(self):
        pos = 0
        while pos < len(self.text):
            m = _TOKEN_RE.match(self.text, pos)
            if m is None or m.end() == pos:
                stripped = self.text[pos:].lstrip()
                if not stripped:
                    break
                at = len(self.text) - len(stripped)
                raise ScltlSyntaxError(f"unexpected character {stripped[0]!r}", at)
            at = m.start(m.lastindex)
            tok = m.group(m.lastindex)
            self.tokens.append((tok, at))
            pos = m.end()

    def peek(self):
        return self.tokens[self.idx] if self.idx < len(self.tokens) else (None, len(self.text))

    def take(self):
        tok = self.peek()
        self.idx += 1
        return tok

    def expect(self, symbol: str):
        tok, at = self.take()
        if tok != symbol:
            raise ScltlSyntaxError(f"expected {symbol!r}, found {tok!r}", at)

    def parse(self) -> Node:
        node = self.formula()
        tok, at = self.peek()
        if tok is not None:
            raise ScltlSyntaxError(f"unexpected trailing token {tok!r}", at)
        return node

    def formula(self) -> Node:
        left = self.disj()
        tok, _ = self.peek()
        if tok == "U":
            self.take()
            right = self.formula()
            return Until(left, right)
        return left

    def disj(self) -> Node:
        parts = [self.conj()]
        while self.peek()[0] == "|":
            self.take()
            parts.append(self.conj())
        return parts[0] if len(parts) == 1 else make_or(*parts)

    def conj(self) -> Node:
        parts = [self.unary()]
        while self.peek()[0] == "&":
            self.take()
            parts.append(self.unary())
        return parts[0] if len(parts) == 1 else make_and(*parts)

    def unary(self) -> Node:
        tok, at = self.peek()
        if tok == "!":
            self.take()
            return negate(self.unary(), at)
        if tok == "X":
            self.take()
            return Next(self.unary())
        if tok == "(":
            self.take()
            node = self.formula()
            self.expect(")")
            return node
        if tok is None:
            raise ScltlSyntaxError("unexpected end of formula", at)
        if tok in ("&", "|", ")", "U"):
            raise ScltlSyntaxError(f"unexpected token {tok!r}", at)
        self.take()
        if tok not in self.ap:
            raise UnknownPropositionError(
                f"unknown proposition {tok!r} (declared: {sorted(self.ap)})"
            )
        return Atom(tok)


def parse_scltl(text: str, ap) -> Node:
    """Parse formula text over the declared propositions into a canonical AST.

    Boolean negations are normalized to the atoms; negation over X or U is a
    syntax error, as is any proposition not listed in ``ap``.
    """
    if not str(text).strip():
        raise ScltlSyntaxError("empty formula", 0)
    return _Parser(str(text), ap).parse()
