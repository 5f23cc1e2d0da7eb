"""Reverse-mode autodiff over an append-only operation tape.

Every recorded node stores its forward output and a closure computing the
gradients of its inputs from the gradient of its output. `backward` walks
the tape once, in reverse creation order, accumulating gradients by
addition whenever a node feeds several consumers.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import IdentityError, ShapeError
from .tensor import Tensor4

# backward closure: grad wrt output -> one grad (or None) per input
_BwdFn = Callable[[np.ndarray], tuple]


class _TapeNode:
    __slots__ = ("kind", "inputs", "value", "bwd")

    def __init__(self, kind: str, inputs: tuple[int, ...], value: Tensor4, bwd):
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.bwd = bwd


class Node:
    """Handle to one tape position; the tensor itself lives on the tape."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> Tensor4:
        return self.tape._nodes[self.idx].value

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.value.dims

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    def __repr__(self) -> str:
        return f"Node(idx={self.idx}, dims={self.dims})"


class Tape:
    def __init__(self):
        self._nodes: list[_TapeNode] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def leaf(self, value: Tensor4, kind: str = "leaf") -> Node:
        self._nodes.append(_TapeNode(kind, (), value, None))
        return Node(self, len(self._nodes) - 1)

    def constant(self, value: Tensor4) -> Node:
        """Leaf excluded from gradient computation (inputs, labels, consts)."""
        return self.leaf(value, kind="const")

    def is_constant(self, node: Node) -> bool:
        return node.tape is self and self._nodes[node.idx].kind == "const"

    def record(self, kind: str, inputs: Sequence[Node], value: Tensor4,
               bwd: _BwdFn) -> Node:
        idxs = []
        for node in inputs:
            if node.tape is not self:
                raise IdentityError(f"input node of '{kind}' lives on another tape")
            idxs.append(node.idx)
        self._nodes.append(_TapeNode(kind, tuple(idxs), value, bwd))
        return Node(self, len(self._nodes) - 1)


class GradMap:
    """Gradients keyed by node, each with the dims of its node's output."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __contains__(self, node: Node) -> bool:
        return node.tape is self._tape and node.idx in self._grads

    def get(self, node: Node) -> Tensor4:
        if node.tape is not self._tape:
            raise IdentityError("node does not belong to this tape")
        try:
            return Tensor4(self._grads[node.idx])
        except KeyError:
            raise IdentityError(f"no gradient recorded for node {node.idx}") from None


def backward(tape: Tape, loss: Node, wanted: Iterable[Node] | None = None) -> GradMap:
    """Gradient of `loss` w.r.t. every node reachable backward from it.

    `wanted` optionally restricts which gradients are kept; intermediate
    gradients are then freed as soon as they have been propagated, which
    bounds memory during training. Results are identical either way.
    """
    if loss.tape is not tape:
        raise IdentityError("loss node is not on this tape")
    if loss.value.dims != (1, 1, 1, 1):
        raise ShapeError(f"loss must be scalar (1,1,1,1), got {loss.value.dims}")

    keep = None if wanted is None else {n.idx for n in wanted}
    nodes = tape._nodes
    grads: dict[int, np.ndarray] = {
        loss.idx: np.ones((1, 1, 1, 1), dtype=loss.value.dtype.type)
    }
    owned = {loss.idx}

    for idx in range(loss.idx, -1, -1):
        g = grads.get(idx)
        if g is None:
            continue
        node = nodes[idx]
        if node.bwd is not None:
            in_grads = node.bwd(g)
            for in_idx, ig in zip(node.inputs, in_grads):
                if ig is None or nodes[in_idx].kind == "const":
                    continue
                if in_idx not in grads:
                    grads[in_idx] = ig
                    owned.discard(in_idx)
                elif in_idx in owned:
                    grads[in_idx] += ig
                else:
                    # First accumulation: the stored array may alias a node
                    # value or another gradient, so add out-of-place once.
                    grads[in_idx] = grads[in_idx] + ig
                    owned.add(in_idx)
        if keep is not None and idx not in keep:
            del grads[idx]
            owned.discard(idx)

    return GradMap(tape, grads)


def _binary_check(a: Node, b: Node, kind: str) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{kind}: dims mismatch {a.dims} vs {b.dims}")
    if a.value.dtype != b.value.dtype:
        raise ShapeError(f"{kind}: dtype mismatch {a.value.dtype} vs {b.value.dtype}")


def add(a: Node, b: Node) -> Node:
    _binary_check(a, b, "add")

    def bwd(g):
        return g, g

    return a.tape.record("add", (a, b), Tensor4(a.data + b.data), bwd)


def sub(a: Node, b: Node) -> Node:
    _binary_check(a, b, "sub")

    def bwd(g):
        return g, -g

    return a.tape.record("sub", (a, b), Tensor4(a.data - b.data), bwd)


def mul(a: Node, b: Node) -> Node:
    _binary_check(a, b, "mul")
    av, bv = a.data, b.data

    def bwd(g):
        return g * bv, g * av

    return a.tape.record("mul", (a, b), Tensor4(av * bv), bwd)


def div(a: Node, b: Node) -> Node:
    _binary_check(a, b, "div")
    av, bv = a.data, b.data

    def bwd(g):
        return g / bv, -g * av / (bv * bv)

    return a.tape.record("div", (a, b), Tensor4(av / bv), bwd)


_EW = {"add": add, "sub": sub, "mul": mul}


def ew_binary(a: Node, b: Node, kind: str) -> Node:
    try:
        op = _EW[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return op(a, b)


def reduce_sum(x: Node) -> Node:
    """Sum of all elements as a (1,1,1,1) node; gradient is all-ones."""
    xv = x.data
    total = np.array(xv.sum(), dtype=xv.dtype).reshape(1, 1, 1, 1)

    def bwd(g):
        return (np.full(xv.shape, g[0, 0, 0, 0], dtype=xv.dtype),)

    return x.tape.record("reduce_sum", (x,), Tensor4(total), bwd)
