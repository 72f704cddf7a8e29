"""A small eager reverse-mode tape over 2-D float64 arrays.

Every op computes its value immediately and registers a closure mapping the
upstream gradient to one gradient per parent. ``Tape.backward`` walks the
nodes in reverse creation order, which is a reverse topological order since
parents always precede their children.

``mask_const`` is the straight-through hook for N:M masks: the mask is data,
so the backward pass multiplies by the mask and sends nothing to the
selection that produced it.
"""

from __future__ import annotations

import weakref
from enum import Enum
from typing import Callable

import numpy as np

from .linalg import ShapeError


class OpKind(str, Enum):
    LEAF = "Leaf"
    MATMUL = "MatMul"
    ADD = "Add"
    MUL = "Mul"
    EXP = "Exp"
    LOG = "Log"
    LOGSUMEXP = "LogSumExp"
    SOFTMAX = "Softmax"
    GATHER = "Gather"
    SCALE = "Scale"
    NEG = "Neg"
    SILU = "SiLU"
    MASK_CONST = "MaskConst"
    SUM_ROWS = "SumRows"
    SMOOTH_TERMS = "SmoothTerms"
    TRANSPOSE = "Transpose"


class Node:
    __slots__ = ("value", "op_kind", "parents", "grad", "_tape", "requires_grad", "_backward", "name")

    def __init__(self, tape, value, op_kind, parents=(), backward=None, requires_grad=False, name=None):
        # weak so that dropping the tape frees its arrays without waiting for the cycle collector
        self._tape = weakref.ref(tape)
        self.value = value
        self.op_kind = op_kind
        self.parents = parents
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = backward
        self.name = name

    @property
    def tape(self):
        return self._tape()

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op_kind.value}, shape={self.value.shape})"


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Tape:
    """Append-only node store; call :meth:`clear` between steps."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaf_registry: dict[str, Node] = {}

    def clear(self):
        self.nodes.clear()
        self.leaf_registry.clear()

    # -- construction ---------------------------------------------------

    def _push(self, value, op_kind, parents, backward):
        for p in parents:
            if p.tape is not self:
                raise ValueError(f"input {p!r} belongs to a different tape")
        req = any(p.requires_grad for p in parents)
        node = Node(self, value, op_kind, tuple(parents), backward if req else None, req)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str | None = None, requires_grad: bool = True) -> Node:
        value = np.array(value, dtype=np.float64, copy=True)
        if value.ndim != 2:
            raise ShapeError(f"tape values must be 2-D, got shape {value.shape}")
        node = Node(self, value, OpKind.LEAF, requires_grad=requires_grad, name=name)
        self.nodes.append(node)
        if name is not None:
            if name in self.leaf_registry:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaf_registry[name] = node
        return node

    def const(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def _lift(self, x) -> Node:
        return x if isinstance(x, Node) else self.const(np.atleast_2d(np.asarray(x, dtype=np.float64)))

    # -- ops ------------------------------------------------------------

    def matmul(self, a: Node, b: Node) -> Node:
        a, b = self._lift(a), self._lift(b)
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
        av, bv = a.value, b.value
        return self._push(av @ bv, OpKind.MATMUL, (a, b), lambda g: (g @ bv.T, av.T @ g))

    def add(self, a: Node, b: Node) -> Node:
        a, b = self._lift(a), self._lift(b)
        try:
            out = a.value + b.value
        except ValueError as err:
            raise ShapeError(f"cannot add {a.shape} and {b.shape}") from err
        sa, sb = a.shape, b.shape
        return self._push(out, OpKind.ADD, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def sub(self, a: Node, b: Node) -> Node:
        return self.add(a, self.neg(self._lift(b)))

    def mul(self, a: Node, b: Node) -> Node:
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        try:
            out = av * bv
        except ValueError as err:
            raise ShapeError(f"cannot multiply elementwise {a.shape} and {b.shape}") from err
        return self._push(
            out, OpKind.MUL, (a, b),
            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        )

    def exp(self, x: Node) -> Node:
        out = np.exp(x.value)
        return self._push(out, OpKind.EXP, (x,), lambda g: (g * out,))

    def log(self, x: Node) -> Node:
        xv = x.value
        return self._push(np.log(xv), OpKind.LOG, (x,), lambda g: (g / xv,))

    def logsumexp(self, x: Node, axis: int) -> Node:
        """Reduce along ``axis``, keeping it as a length-1 dimension."""
        xv = x.value
        mx = xv.max(axis=axis, keepdims=True)
        e = np.exp(xv - mx)
        s = e.sum(axis=axis, keepdims=True)
        out = np.log(s) + mx
        soft = e / s
        return self._push(out, OpKind.LOGSUMEXP, (x,), lambda g: (g * soft,))

    def softmax(self, x: Node, axis: int = 1) -> Node:
        xv = x.value
        e = np.exp(xv - xv.max(axis=axis, keepdims=True))
        out = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return self._push(out, OpKind.SOFTMAX, (x,), back)

    def gather(self, x: Node, index, axis: int) -> Node:
        """``out = take(x, index, axis)``; the adjoint scatter-adds back."""
        index = np.asarray(index, dtype=np.int64)
        shape = x.shape

        def back(g):
            gx = np.zeros(shape)
            if axis == 0:
                np.add.at(gx, index, g)
            else:
                np.add.at(gx.T, index, g.T)
            return (gx,)

        return self._push(np.take(x.value, index, axis=axis), OpKind.GATHER, (x,), back)

    def scale(self, x: Node, c: float) -> Node:
        c = float(c)
        return self._push(x.value * c, OpKind.SCALE, (x,), lambda g: (g * c,))

    def neg(self, x: Node) -> Node:
        return self._push(-x.value, OpKind.NEG, (x,), lambda g: (-g,))

    def silu(self, x: Node) -> Node:
        xv = x.value
        s = _sigmoid(xv)
        return self._push(xv * s, OpKind.SILU, (x,), lambda g: (g * s * (1.0 + xv * (1.0 - s)),))

    def mask_const(self, x: Node, mask) -> Node:
        m = np.asarray(mask, dtype=np.float64)
        if m.shape != x.shape:
            raise ShapeError(f"mask {m.shape} does not match {x.shape}")
        return self._push(x.value * m, OpKind.MASK_CONST, (x,), lambda g: (g * m,))

    def sum(self, x: Node, axis: int | None = None) -> Node:
        """Sum over ``axis`` (kept as length 1), or over everything into a 1x1."""
        shape = x.shape
        if axis is None:
            out = np.array([[x.value.sum()]])
        else:
            out = x.value.sum(axis=axis, keepdims=True)
        return self._push(out, OpKind.SUM_ROWS, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))

    def smooth_terms(self, x: Node, delta: float = 1.0) -> Node:
        """Elementwise Huber: ``0.5 x^2`` inside ``|x| <= delta``, linear outside."""
        xv = x.value
        inside = np.abs(xv) <= delta
        out = np.where(inside, 0.5 * xv * xv, delta * (np.abs(xv) - 0.5 * delta))
        slope = np.where(inside, xv, delta * np.sign(xv))
        return self._push(out, OpKind.SMOOTH_TERMS, (x,), lambda g: (g * slope,))

    def transpose(self, x: Node) -> Node:
        return self._push(x.value.T.copy(), OpKind.TRANSPOSE, (x,), lambda g: (g.T,))

    # -- backward -------------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Accumulate gradients into every node and return them for named leaves."""
        if loss.tape is not self:
            raise ValueError("loss node belongs to a different tape")
        if loss.shape != (1, 1):
            raise ShapeError(f"backward needs a 1x1 loss, got {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            for parent, g in zip(node.parents, node._backward(node.grad)):
                if not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        grads = {}
        for name, leaf in self.leaf_registry.items():
            if leaf.requires_grad:
                grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        return grads


# A program maps (tape, {name: leaf node}) to a 1x1 loss node.
Program = Callable[[Tape, dict], Node]


def value_and_grad(program: Program, params: dict[str, np.ndarray]) -> tuple[float, dict[str, np.ndarray]]:
    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    loss = program(tape, leaves)
    grads = tape.backward(loss)
    return float(loss.value[0, 0]), grads


def evaluate(program: Program, params: dict[str, np.ndarray]) -> float:
    tape = Tape()
    leaves = {k: tape.leaf(v, name=k, requires_grad=False) for k, v in params.items()}
    return float(program(tape, leaves).value[0, 0])


def relative_error(a, b, floor: float = 1e-6) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(program: Program, params: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences, one parameter entry at a time."""
    out = {}
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    for name, value in work.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + h
            fp = evaluate(program, work)
            value[idx] = orig - h
            fm = evaluate(program, work)
            value[idx] = orig
            g[idx] = (fp - fm) / (2.0 * h)
        out[name] = g
    return out


def finite_diff_check(program: Program, params: dict[str, np.ndarray], h: float = 1e-5,
                      floor: float = 1e-6) -> float:
    """Worst relative deviation between tape gradients and central differences."""
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"step h={h} outside [1e-7, 1e-3]")
    _, grads = value_and_grad(program, params)
    numeric = numeric_grad(program, params, h)
    worst = 0.0
    for name in params:
        if grads[name].size:
            worst = max(worst, float(relative_error(grads[name], numeric[name], floor).max()))
    return worst
