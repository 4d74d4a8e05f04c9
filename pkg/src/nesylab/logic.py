"""Propositional constraints, possible worlds and weighted model counting.

Worlds are indexed big-endian over the canonical variable order: the first
variable is the most significant bit of the world index. For variables
``[red, green]`` the world order is ``(!r!g, !rg, r!g, rg)``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

MAX_VARS = 20


class FormulaSyntaxError(ValueError):
    """Raised by :func:`parse` with the character offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Not:
    operand: "Node"


@dataclass(frozen=True)
class And:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Or:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Implies:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Iff:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class ConstTrue:
    pass


@dataclass(frozen=True)
class ConstFalse:
    pass


Node = Union[Var, Not, And, Or, Implies, Iff, ConstTrue, ConstFalse]
_BINARY = (And, Or, Implies, Iff)
_SYMBOLS = {And: "&", Or: "|", Implies: "->", Iff: "<->"}


def _collect_vars(node: Node, out: list[str]) -> None:
    stack = [node]
    while stack:
        n = stack.pop()
        if isinstance(n, Var):
            if n.name not in out:
                out.append(n.name)
        elif isinstance(n, Not):
            stack.append(n.operand)
        elif isinstance(n, _BINARY):
            # right pushed first so the left subtree is visited first
            stack.append(n.right)
            stack.append(n.left)


def _render(node: Node) -> str:
    if isinstance(node, Var):
        return node.name
    if isinstance(node, ConstTrue):
        return "true"
    if isinstance(node, ConstFalse):
        return "false"
    if isinstance(node, Not):
        return f"!{_render(node.operand)}"
    return f"({_render(node.left)} {_SYMBOLS[type(node)]} {_render(node.right)})"


@dataclass(frozen=True)
class Formula:
    """A propositional formula together with its canonical variable order."""

    root: Node
    variables: tuple[str, ...] = field(default=())

    def __post_init__(self):
        found: list[str] = []
        _collect_vars(self.root, found)
        if not self.variables:
            object.__setattr__(self, "variables", tuple(found))
            return
        if len(set(self.variables)) != len(self.variables):
            raise ValueError(f"duplicate variable names in {self.variables}")
        missing = [v for v in found if v not in self.variables]
        if missing:
            raise ValueError(f"variables {missing} not in variable order {self.variables}")

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    def over(self, variables: Sequence[str]) -> "Formula":
        """The same formula re-expressed over a (super)set of variables."""
        return Formula(self.root, tuple(variables))

    def negate(self) -> "Formula":
        return Formula(Not(self.root), self.variables)

    def __str__(self) -> str:
        return _render(self.root)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<op><->|->|[!&|()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            offset = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise FormulaSyntaxError(f"unexpected character {text[offset]!r}", offset)
        if m.group("ident") is not None:
            tokens.append(("ident", m.group("ident"), m.start("ident")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    # precedence low to high: <->, ->, |, &, !
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str):
        kind, value, offset = self.peek()
        if kind != "op" or value != op:
            found = "end of input" if kind == "end" else repr(value)
            raise FormulaSyntaxError(f"expected {op!r}, found {found}", offset)
        self.take()

    def iff(self) -> Node:
        node = self.implies()
        while self.peek()[:2] == ("op", "<->"):
            self.take()
            node = Iff(node, self.implies())
        return node

    def implies(self) -> Node:
        left = self.disj()
        if self.peek()[:2] == ("op", "->"):
            self.take()
            return Implies(left, self.implies())
        return left

    def disj(self) -> Node:
        node = self.conj()
        while self.peek()[:2] == ("op", "|"):
            self.take()
            node = Or(node, self.conj())
        return node

    def conj(self) -> Node:
        node = self.unary()
        while self.peek()[:2] == ("op", "&"):
            self.take()
            node = And(node, self.unary())
        return node

    def unary(self) -> Node:
        kind, value, offset = self.peek()
        if kind == "op" and value == "!":
            self.take()
            return Not(self.unary())
        if kind == "op" and value == "(":
            self.take()
            node = self.iff()
            self.expect_op(")")
            return node
        if kind == "ident":
            self.take()
            if value == "true":
                return ConstTrue()
            if value == "false":
                return ConstFalse()
            return Var(value)
        found = "end of input" if kind == "end" else repr(value)
        raise FormulaSyntaxError(f"expected operand, found {found}", offset)


def parse(text: str) -> Formula:
    """Parse constraint text such as ``"!red & green"`` into a :class:`Formula`.

    Operators by increasing precedence: ``<->``, ``->`` (right-associative),
    ``|``, ``&``, ``!``. Literals ``true`` and ``false`` are reserved.
    """
    if not text or not text.strip():
        raise FormulaSyntaxError("empty formula", 0)
    p = _Parser(text)
    root = p.iff()
    kind, value, offset = p.peek()
    if kind != "end":
        raise FormulaSyntaxError(f"unexpected {value!r}", offset)
    return Formula(root)


# ---------------------------------------------------------------------------
# Worlds and evaluation
# ---------------------------------------------------------------------------


def world_from_index(index: int, n_vars: int) -> tuple[bool, ...]:
    if not 0 <= index < 2**n_vars:
        raise ValueError(f"world index {index} out of range for {n_vars} variables")
    return tuple(bool((index >> (n_vars - 1 - i)) & 1) for i in range(n_vars))


def world_index(world: Sequence[bool]) -> int:
    m = 0
    for bit in world:
        m = (m << 1) | int(bool(bit))
    return m


def _eval_node(node: Node, env: dict[str, bool]) -> bool:
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, ConstTrue):
        return True
    if isinstance(node, ConstFalse):
        return False
    if isinstance(node, Not):
        return not _eval_node(node.operand, env)
    a = _eval_node(node.left, env)
    b = _eval_node(node.right, env)
    if isinstance(node, And):
        return a and b
    if isinstance(node, Or):
        return a or b
    if isinstance(node, Implies):
        return (not a) or b
    return a == b


def evaluate(f: Formula, world: Sequence[bool]) -> bool:
    """Truth value of ``f`` in ``world`` (one bit per variable, canonical order)."""
    if len(world) != f.n_vars:
        raise ValueError(f"world has {len(world)} entries, formula has {f.n_vars} variables")
    return _eval_node(f.root, dict(zip(f.variables, map(bool, world))))


def _check_guard(n_vars: int) -> None:
    if n_vars > MAX_VARS:
        raise ValueError(f"{n_vars} variables exceeds the enumeration limit of {MAX_VARS}")


def truth_columns(n_vars: int) -> np.ndarray:
    """Boolean matrix of shape ``(2**n_vars, n_vars)``; row m is world m."""
    _check_guard(n_vars)
    m = np.arange(2**n_vars)
    shifts = np.arange(n_vars - 1, -1, -1)
    return ((m[:, None] >> shifts[None, :]) & 1).astype(bool)


def _eval_columns(node: Node, cols: dict[str, np.ndarray], size: int) -> np.ndarray:
    if isinstance(node, Var):
        return cols[node.name]
    if isinstance(node, ConstTrue):
        return np.ones(size, dtype=bool)
    if isinstance(node, ConstFalse):
        return np.zeros(size, dtype=bool)
    if isinstance(node, Not):
        return ~_eval_columns(node.operand, cols, size)
    a = _eval_columns(node.left, cols, size)
    b = _eval_columns(node.right, cols, size)
    if isinstance(node, And):
        return a & b
    if isinstance(node, Or):
        return a | b
    if isinstance(node, Implies):
        return ~a | b
    return a == b


def models_vector(f: Formula) -> np.ndarray:
    """Bit vector over all worlds of ``f``: entry m is 1 iff world m satisfies ``f``."""
    table = truth_columns(f.n_vars)
    cols = {name: table[:, i] for i, name in enumerate(f.variables)}
    return _eval_columns(f.root, cols, table.shape[0]).astype(np.int8)


@dataclass(frozen=True, eq=False)
class WorldTable:
    variables: tuple[str, ...]
    class_betas: np.ndarray  # (K, 2**N) int8
    is_partition: bool
    mutually_exclusive: bool
    exhaustive: bool

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def n_worlds(self) -> int:
        return 2**self.n_vars


def build_world_table(classes: Sequence[Formula], shared_vars: Sequence[str] | None = None) -> WorldTable:
    """Satisfaction bit vectors of each class formula over a shared variable order."""
    if not classes:
        raise ValueError("need at least one class formula")
    if shared_vars is None:
        order: list[str] = []
        for f in classes:
            order.extend(v for v in f.variables if v not in order)
        shared_vars = order
    shared_vars = tuple(shared_vars)
    _check_guard(len(shared_vars))
    for k, f in enumerate(classes):
        outside = [v for v in f.variables if v not in shared_vars]
        if outside:
            raise ValueError(f"class {k} uses variables {outside} outside {shared_vars}")
    betas = np.stack([models_vector(f.over(shared_vars)) for f in classes])
    overlap = betas.sum(axis=0)
    exclusive = bool(np.all(overlap <= 1))
    exhaustive = bool(np.all(overlap >= 1))
    return WorldTable(shared_vars, betas, exclusive and exhaustive, exclusive, exhaustive)


# ---------------------------------------------------------------------------
# Probabilities
# ---------------------------------------------------------------------------


def _as_probs(p: Iterable[float]) -> np.ndarray:
    probs = np.asarray(p, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(probs)) or np.any(probs < 0.0) or np.any(probs > 1.0):
        raise ValueError(f"probabilities must lie in [0, 1], got {probs.tolist()}")
    return probs


def world_distribution(p: Iterable[float]) -> np.ndarray:
    """Probability of every world under independent Bernoulli variables."""
    probs = _as_probs(p)
    table = truth_columns(len(probs))
    q = np.ones(table.shape[0])
    # factors multiplied in variable order
    for i, pi in enumerate(probs):
        q = q * np.where(table[:, i], pi, 1.0 - pi)
    return q


def wmc(f: Formula, p: Iterable[float]) -> float:
    """Weighted model count of ``f``: total probability of its satisfying worlds."""
    probs = _as_probs(p)
    if len(probs) != f.n_vars:
        raise ValueError(f"got {len(probs)} probabilities for {f.n_vars} variables")
    sat = models_vector(f).astype(bool)
    q = world_distribution(probs)
    # sequential accumulation in world order; adding exact zeros keeps the sum
    # identical to summing only the satisfying worlds
    return float(np.cumsum(np.where(sat, q, 0.0))[-1])


def conjoin(nodes: Sequence[Node]) -> Node:
    if not nodes:
        return ConstTrue()
    if len(nodes) == 1:
        return nodes[0]
    mid = len(nodes) // 2
    return And(conjoin(nodes[:mid]), conjoin(nodes[mid:]))


def disjoin(nodes: Sequence[Node]) -> Node:
    """Balanced disjunction; ``false`` when empty."""
    if not nodes:
        return ConstFalse()
    if len(nodes) == 1:
        return nodes[0]
    mid = len(nodes) // 2
    return Or(disjoin(nodes[:mid]), disjoin(nodes[mid:]))


def minterm(index: int, variables: Sequence[str]) -> Node:
    bits = world_from_index(index, len(variables))
    return conjoin([Var(v) if b else Not(Var(v)) for v, b in zip(variables, bits)])


def dnf_over_worlds(indices: Iterable[int], variables: Sequence[str]) -> Formula:
    """The formula satisfied by exactly the listed worlds."""
    return Formula(disjoin([minterm(m, variables) for m in sorted(indices)]), tuple(variables))


TRAFFIC_LIGHT = "(!red & green) | (red & !green) | (!red & !green)"
TRAFFIC_VARS = ("red", "green")
