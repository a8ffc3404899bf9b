"""Reverse-mode differentiation over numpy arrays via an explicit tape.

Every primitive dispatches on its arguments: with plain ndarrays it computes
the numpy result directly; with a `Tensor` argument it records a node on the
owning `Tape` and computes the forward value through the *same* kernel, so a
recorded computation is bit-identical to the un-recorded one.

A node stores its parents, constant arguments, forward kernel, and a vjp
closure. `Tape.backward` seeds a scalar output and accumulates cotangents in
reverse topological order (which is just recording order). Non-smooth
primitives (relu, clip, masked branches, distance-field cell lookups) append
their branch choice to the tape's signature so callers can detect when two
nearby evaluations took different branches.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Optional

import numpy as np


class Node:
    __slots__ = ("op", "parents", "consts", "value", "fwd", "vjp")

    def __init__(self, op, parents, consts, value, fwd, vjp):
        self.op = op
        self.parents = parents  # tuple of node indices (None for const args)
        self.consts = consts    # tuple mirroring parents; value where const
        self.value = value
        self.fwd = fwd          # kernel recomputing value from arg values
        self.vjp = vjp          # vjp(g, arg_values, value) -> per-arg grads


class Tensor:
    """Handle to one node of a tape; supports numpy-style arithmetic."""

    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(idx={self.idx}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self._sig = hashlib.sha256()
        self._leaf_names: dict[str, int] = {}
        self.output: Optional["Tensor"] = None  # scalar loss, set by recorders
        self.meta: dict = {}

    # -- construction ------------------------------------------------------

    def leaf(self, value, name: Optional[str] = None) -> Tensor:
        value = np.asarray(value, dtype=float)
        self.nodes.append(Node("leaf", (), (), value, None, None))
        idx = len(self.nodes) - 1
        if name is not None:
            if name in self._leaf_names:
                raise ValueError(f"duplicate leaf name {name!r}")
            self._leaf_names[name] = idx
        return Tensor(self, idx)

    def record(self, op, args, fwd, vjp) -> Tensor:
        vals = tuple(a.value if isinstance(a, Tensor) else np.asarray(a, dtype=float)
                     for a in args)
        parents = tuple(a.idx if isinstance(a, Tensor) else None for a in args)
        consts = tuple(None if isinstance(a, Tensor) else v
                       for a, v in zip(args, vals))
        value = fwd(*vals)
        self.nodes.append(Node(op, parents, consts, np.asarray(value), fwd, vjp))
        return Tensor(self, len(self.nodes) - 1)

    def note_branch(self, data: np.ndarray) -> None:
        """Fold a branch decision (mask, cell index, ...) into the signature."""
        self._sig.update(np.ascontiguousarray(data).tobytes())

    def branch_signature(self) -> str:
        return self._sig.hexdigest()

    # -- execution ----------------------------------------------------------

    def _arg_values(self, node: Node, values: list) -> tuple:
        return tuple(values[p] if p is not None else c
                     for p, c in zip(node.parents, node.consts))

    def replay(self) -> list:
        """Recompute every node from the leaves; returns the new values.

        The recorded values are left untouched; callers compare for the
        bit-identical replay guarantee.
        """
        values: list = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.fwd is None:
                values[i] = node.value
            else:
                values[i] = np.asarray(node.fwd(*self._arg_values(node, values)))
        return values

    def backward(self, out: Tensor, seed: float = 1.0) -> dict:
        """Reverse sweep from a scalar output; returns {node_idx: grad}."""
        if out.tape is not self:
            raise ValueError("output tensor does not belong to this tape")
        if np.asarray(out.value).size != 1:
            raise ValueError("backward requires a scalar output")
        grads: dict[int, np.ndarray] = {
            out.idx: np.full_like(np.asarray(out.value, dtype=float), float(seed))
        }
        for i in range(out.idx, -1, -1):
            g = grads.get(i)
            if g is None:
                continue
            node = self.nodes[i]
            if node.vjp is None:
                continue
            arg_vals = self._arg_values(node, [n.value for n in self.nodes])
            parts = node.vjp(g, arg_vals, node.value)
            for p, pg in zip(node.parents, parts):
                if p is None or pg is None:
                    continue
                if p in grads:
                    grads[p] = grads[p] + pg
                else:
                    grads[p] = pg
        return grads

    def leaf_grad(self, grads: dict, name: str, like: Optional[np.ndarray] = None):
        idx = self._leaf_names[name]
        g = grads.get(idx)
        if g is None:
            ref = like if like is not None else self.nodes[idx].value
            return np.zeros_like(np.asarray(ref, dtype=float))
        return g


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else x


def tape_of(*args) -> Optional[Tape]:
    for a in args:
        if isinstance(a, Tensor):
            return a.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a cotangent back down to the shape it was broadcast from."""
    g = np.asarray(g)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Arithmetic primitives
# ---------------------------------------------------------------------------

def add(a, b):
    t = tape_of(a, b)
    if t is None:
        return np.add(a, b)
    return t.record("add", (a, b), np.add,
                    lambda g, v, o: (_unbroadcast(g, np.shape(v[0])),
                                     _unbroadcast(g, np.shape(v[1]))))


def sub(a, b):
    t = tape_of(a, b)
    if t is None:
        return np.subtract(a, b)
    return t.record("sub", (a, b), np.subtract,
                    lambda g, v, o: (_unbroadcast(g, np.shape(v[0])),
                                     _unbroadcast(-g, np.shape(v[1]))))


def mul(a, b):
    t = tape_of(a, b)
    if t is None:
        return np.multiply(a, b)
    return t.record("mul", (a, b), np.multiply,
                    lambda g, v, o: (_unbroadcast(g * v[1], np.shape(v[0])),
                                     _unbroadcast(g * v[0], np.shape(v[1]))))


def div(a, b):
    t = tape_of(a, b)
    if t is None:
        return np.divide(a, b)
    return t.record("div", (a, b), np.divide,
                    lambda g, v, o: (_unbroadcast(g / v[1], np.shape(v[0])),
                                     _unbroadcast(-g * v[0] / (v[1] * v[1]),
                                                  np.shape(v[1]))))


def neg(a):
    t = tape_of(a)
    if t is None:
        return np.negative(a)
    return t.record("neg", (a,), np.negative, lambda g, v, o: (-g,))


def _matmul_vjp(g, v, o):
    a, b = v
    ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), np.shape(a))
    gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), np.shape(b))
    return ga, gb


def matmul(a, b):
    t = tape_of(a, b)
    if t is None:
        return np.matmul(a, b)
    if value_of(a).ndim < 2 or value_of(b).ndim < 2:
        raise ValueError("matmul on tape requires >=2-D operands")
    return t.record("matmul", (a, b), np.matmul, _matmul_vjp)


def tsum(a, axis=None, keepdims=False):
    t = tape_of(a)
    if t is None:
        return np.sum(a, axis=axis, keepdims=keepdims)

    def fwd(x):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def vjp(g, v, o):
        x = v[0]
        if axis is None:
            return (np.broadcast_to(g, np.shape(x)).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, np.shape(x)).copy(),)

    return t.record("sum", (a,), fwd, vjp)


def mean(a, axis=None):
    if axis is None:
        count = int(np.prod(np.shape(value_of(a)))) or 1
    else:
        count = np.shape(value_of(a))[axis]
    return mul(tsum(a, axis=axis), 1.0 / count)


def reshape(a, shape):
    t = tape_of(a)
    if t is None:
        return np.reshape(a, shape)
    return t.record("reshape", (a,), lambda x: np.reshape(x, shape),
                    lambda g, v, o: (np.reshape(g, np.shape(v[0])),))


def transpose(a, axes):
    t = tape_of(a)
    if t is None:
        return np.transpose(a, axes)
    inv = np.argsort(axes)
    return t.record("transpose", (a,), lambda x: np.transpose(x, axes),
                    lambda g, v, o: (np.transpose(g, inv),))


def concat(parts, axis=0):
    t = tape_of(*parts)
    if t is None:
        return np.concatenate(parts, axis=axis)
    sizes = [np.shape(value_of(p))[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def fwd(*vals):
        return np.concatenate(vals, axis=axis)

    def vjp(g, v, o):
        return tuple(np.take(g, np.arange(offsets[k], offsets[k + 1]), axis=axis)
                     for k in range(len(sizes)))

    return t.record("concat", tuple(parts), fwd, vjp)


def take(a, indices, axis=0):
    indices = np.asarray(indices)
    if indices.ndim != 1:
        raise ValueError("take expects a 1-D index array")
    t = tape_of(a)
    if t is None:
        return np.take(a, indices, axis=axis)

    def fwd(x):
        return np.take(x, indices, axis=axis)

    def vjp(g, v, o):
        out = np.zeros_like(v[0])
        np.add.at(np.moveaxis(out, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (out,)

    return t.record("take", (a,), fwd, vjp)


def exp(a):
    t = tape_of(a)
    if t is None:
        return np.exp(a)
    return t.record("exp", (a,), np.exp, lambda g, v, o: (g * o,))


def log(a):
    t = tape_of(a)
    if t is None:
        return np.log(a)
    return t.record("log", (a,), np.log, lambda g, v, o: (g / v[0],))


def power(a, p: float):
    t = tape_of(a)
    if t is None:
        return np.power(a, p)
    return t.record("power", (a,), lambda x: np.power(x, p),
                    lambda g, v, o: (g * p * np.power(v[0], p - 1.0),))


def sqrt(a):
    t = tape_of(a)
    if t is None:
        return np.sqrt(a)
    return t.record("sqrt", (a,), np.sqrt, lambda g, v, o: (g / (2.0 * o),))


def relu(a):
    t = tape_of(a)
    if t is None:
        return np.maximum(a, 0.0)
    mask = value_of(a) > 0.0
    t.note_branch(mask)
    return t.record("relu", (a,), lambda x: np.maximum(x, 0.0),
                    lambda g, v, o: (g * (v[0] > 0.0),))


def clip(a, lo: float, hi: float):
    t = tape_of(a)
    if t is None:
        return np.clip(a, lo, hi)
    v = value_of(a)
    inside = (v > lo) & (v < hi)
    t.note_branch(inside)
    return t.record("clip", (a,), lambda x: np.clip(x, lo, hi),
                    lambda g, v_, o: (g * ((v_[0] > lo) & (v_[0] < hi)),))


def diag_embed(a):
    """(..., k) -> (..., k, k) with the input on the diagonal."""
    t = tape_of(a)

    def fwd(x):
        k = x.shape[-1]
        out = np.zeros(x.shape + (k,))
        idx = np.arange(k)
        out[..., idx, idx] = x
        return out

    if t is None:
        return fwd(np.asarray(a, dtype=float))

    def vjp(g, v, o):
        k = np.shape(v[0])[-1]
        idx = np.arange(k)
        return (g[..., idx, idx],)

    return t.record("diag_embed", (a,), fwd, vjp)


def inv2(a):
    """Inverse of a (2, 2) matrix; vjp is -A^-T g A^-T."""
    t = tape_of(a)
    if t is None:
        return np.linalg.inv(a)

    def vjp(g, v, o):
        return (-o.T @ g @ o.T,)

    return t.record("inv2", (a,), np.linalg.inv, vjp)


def masked(a, mask: np.ndarray):
    """Multiply by a constant 0/1 mask derived from forward values; the mask
    is folded into the branch signature."""
    m = np.asarray(mask, dtype=float)
    t = tape_of(a)
    if t is None:
        return np.multiply(a, m)
    t.note_branch(mask)
    return mul(a, m)
