"""Dense tensors and an append-only gradient tape.

Operations only record onto a tape inside a ``with Tape() as tape:`` block,
so evaluation outside training runs without bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node: Optional[int] = None  # tape index of the producing op; None for leaves
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the primitives live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeNode:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Record of primitive applications in execution (hence topological) order."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Wrap ``out`` as a tensor, recording the op if any input needs a gradient."""
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = len(tape.nodes)
        tape.nodes.append(TapeNode(op, tuple(inputs), result, vjp))
    return result


def backward(root: Tensor, tape: Tape, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
    """Reverse pass from a scalar ``root``.

    Sets ``.grad`` on every leaf reached and returns the gradients of
    ``params`` in order; parameters the root does not depend on get zeros.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not tape.nodes:
        raise ValueError("backward on an empty tape")
    if root.node is None or root.node >= len(tape.nodes) or tape.nodes[root.node].output is not root:
        raise ValueError("root was not recorded on this tape")

    for p in params:
        p.grad = np.zeros_like(p.data)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: root.node + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.node is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
    return [p.grad for p in params]
