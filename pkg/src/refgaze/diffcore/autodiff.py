"""Reverse-mode automatic differentiation over dense numpy arrays.

Graphs are built eagerly: every op computes its value at construction and
remembers a vector-Jacobian closure. `backward` walks the graph once in
reverse topological order and accumulates gradients by summation, so a value
used along several paths gets the sum of the path contributions.

Float32 is the default dtype; ops never force a dtype downcast, so feeding
float64 parameters (as the gradient checker does) promotes the whole graph.
"""
from __future__ import annotations

import numpy as np

from ..errors import ContractError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op NaN/Inf detection (off by default, it doubles op cost)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "grad", "op", "_parents", "_vjp")

    def __init__(self, value, op="const", parents=(), vjp=None):
        self.value = value
        self.grad = None
        self.op = op
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # convenience arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x, dtype=None) -> Node:
    # python scalars become DEFAULT_DTYPE so they don't promote a float32
    # graph to float64; explicit float arrays keep their dtype
    if dtype is not None:
        arr = np.asarray(x, dtype=dtype)
    elif isinstance(x, np.ndarray) and x.dtype.kind == "f":
        arr = x
    else:
        arr = np.asarray(x, dtype=DEFAULT_DTYPE)
    return Node(arr, op="const")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, op, parents, vjp) -> Node:
    value = np.asarray(value)
    if _FINITE_CHECKS and not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite output of op {op!r}")
    return Node(value, op=op, parents=parents, vjp=vjp)


def forward(node: Node) -> np.ndarray:
    """Value of a graph node (already memoized by eager construction)."""
    return node.value


def scalar(node: Node) -> float:
    if node.value.size != 1:
        raise ContractError(f"expected scalar, got shape {node.value.shape}")
    return float(node.value.reshape(()))


def _toposort(root: Node):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Node, params=None) -> None:
    """Populate .grad for every node reachable from `loss`.

    `loss` must be scalar. When `params` (a ParamStore) is given, every
    parameter's grad is reset first, so parameters the loss never touched
    end up with exact zeros rather than None.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if params is not None:
        for p in params.nodes():
            p.grad = np.zeros_like(p.value)
    order = _toposort(loss)
    loss.grad = np.ones_like(loss.value)
    keep = {id(p) for p in params.nodes()} if params is not None else set()
    # accumulation rebinds (grad = grad + g) rather than mutating in place:
    # vjps may hand the same array to several parents, and rebinding keeps
    # that aliasing harmless without a defensive copy per edge
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        grads = node._vjp(node.grad)
        if node is not loss and id(node) not in keep:
            node.grad = None  # intermediate grads are dead once propagated
        for parent, g in zip(node._parents, grads):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return _make(a.value + b.value, "add", (a, b), vjp)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def vjp(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)

    return _make(a.value - b.value, "sub", (a, b), vjp)


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def vjp(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return _make(a.value * b.value, "mul", (a, b), vjp)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)

    def vjp(g):
        return (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        )

    return _make(a.value / b.value, "div", (a, b), vjp)


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.value.shape} @ {b.value.shape}")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ShapeError(f"matmul inner-dim mismatch: {a.value.shape} @ {b.value.shape}")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return _make(np.matmul(a.value, b.value), "matmul", (a, b), vjp)


def transpose(a, axes) -> Node:
    a = as_node(a)
    inverse = np.argsort(axes)
    return _make(
        np.transpose(a.value, axes), "transpose", (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(a, shape) -> Node:
    a = as_node(a)
    orig = a.value.shape
    return _make(a.value.reshape(shape), "reshape", (a,), lambda g: (g.reshape(orig),))


def getitem(a, idx) -> Node:
    """Basic (slice/int) indexing; duplicates are impossible, so the
    backward pass is a plain scatter-add into zeros."""
    a = as_node(a)

    def vjp(g):
        buf = np.zeros_like(a.value)
        buf[idx] += g
        return (buf,)

    return _make(a.value[idx], "getitem", (a,), vjp)


def concat(nodes, axis=0) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(nodes))
        )

    return _make(np.concatenate([n.value for n in nodes], axis=axis), "concat", tuple(nodes), vjp)


def sum_(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    shape = a.value.shape

    def vjp(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    shape = a.value.shape
    if axis is None:
        count = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))

    def vjp(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy() / count,)

    return _make(a.value.mean(axis=axis, keepdims=keepdims), "mean", (a,), vjp)


def abs_(a) -> Node:
    a = as_node(a)
    return _make(np.abs(a.value), "abs", (a,), lambda g: (g * np.sign(a.value),))


def maximum(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    take_a = a.value >= b.value  # ties go to the left operand

    def vjp(g):
        return (
            _unbroadcast(g * take_a, a.value.shape),
            _unbroadcast(g * ~take_a, b.value.shape),
        )

    return _make(np.maximum(a.value, b.value), "maximum", (a, b), vjp)


def minimum(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    take_a = a.value <= b.value

    def vjp(g):
        return (
            _unbroadcast(g * take_a, a.value.shape),
            _unbroadcast(g * ~take_a, b.value.shape),
        )

    return _make(np.minimum(a.value, b.value), "minimum", (a, b), vjp)


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = as_node(a)
    return _make(np.log(a.value), "log", (a,), lambda g: (g / a.value,))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Node:
    # tanh approximation; smooth everywhere, which keeps finite-difference
    # verification clean. In-place arithmetic: FFN activations are among
    # the largest tensors in a step.
    a = as_node(a)
    x = a.value
    t = np.multiply(x, x)
    np.multiply(t, x, out=t)
    np.multiply(t, x.dtype.type(0.044715), out=t)
    np.add(t, x, out=t)
    np.multiply(t, x.dtype.type(_GELU_C), out=t)
    np.tanh(t, out=t)
    out = np.add(t, 1.0)
    np.multiply(out, x, out=out)
    np.multiply(out, x.dtype.type(0.5), out=out)

    def vjp(g):
        d_inner = np.multiply(x, x)
        np.multiply(d_inner, x.dtype.type(3 * 0.044715), out=d_inner)
        np.add(d_inner, 1.0, out=d_inner)
        np.multiply(d_inner, x.dtype.type(_GELU_C), out=d_inner)
        sech2 = np.multiply(t, t)
        np.subtract(x.dtype.type(1.0), sech2, out=sech2)
        np.multiply(sech2, d_inner, out=sech2)
        np.multiply(sech2, x, out=sech2)
        np.add(sech2, t, out=sech2)
        np.add(sech2, x.dtype.type(1.0), out=sech2)
        np.multiply(sech2, x.dtype.type(0.5), out=sech2)
        np.multiply(sech2, g, out=sech2)
        return (sech2,)

    return _make(out, "gelu", (a,), vjp)


# ---------------------------------------------------------------------------
# softmax family, layer norm, embedding, dropout
# ---------------------------------------------------------------------------


def softmax(a, axis=-1) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, "softmax", (a,), vjp)


def masked_softmax(a, mask, axis=-1) -> Node:
    """Softmax over positions where `mask` is True.

    Invalid positions get probability 0; rows with no valid position at all
    produce an all-zero row instead of NaN (reachable with fully-padded
    context windows).
    """
    a = as_node(a)
    valid = np.broadcast_to(np.asarray(mask, dtype=bool), a.value.shape)
    neg = np.where(valid, a.value, -np.inf)
    m = neg.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(neg - m)  # exp(-inf) = 0 handles the masked positions
    s = e.sum(axis=axis, keepdims=True)
    p = e / np.where(s > 0, s, 1.0)

    def vjp(g):
        # the standard softmax VJP vanishes wherever p == 0, which covers
        # both masked entries and fully-masked rows
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, "masked_softmax", (a,), vjp)


def key_masked_softmax(a, key_mask) -> Node:
    """masked_softmax specialized to 4-d scores (B, H, Tq, Tk) with a
    per-batch key validity mask (B, Tk).

    The score tensor is the largest array in a forward pass, so this path
    avoids temporaries: one working buffer, in-place exp/normalize. The max
    is taken over all keys (softmax is shift invariant); rows whose valid
    entries all underflow, and fully-masked rows, are zeroed via the
    guarded divide.
    """
    a = as_node(a)
    if a.value.ndim != 4:
        raise ShapeError(f"key_masked_softmax expects 4-d scores, got {a.value.shape}")
    x = a.value
    valid = np.asarray(key_mask, dtype=bool)
    if valid.shape != (x.shape[0], x.shape[-1]):
        raise ShapeError(f"key mask {valid.shape} does not fit scores {x.shape}")
    mask_f = valid.astype(x.dtype)[:, None, None, :]
    m = x.max(axis=-1, keepdims=True)
    y = np.subtract(x, m)
    np.exp(y, out=y)
    np.multiply(y, mask_f, out=y)
    s = y.sum(axis=-1, keepdims=True)
    np.divide(y, np.where(s > 0, s, 1.0), out=y)
    p = y

    def vjp(g):
        t = np.multiply(g, p)
        dot = t.sum(axis=-1, keepdims=True)
        np.subtract(g, dot, out=t)
        np.multiply(t, p, out=t)
        return (t,)

    return _make(p, "key_masked_softmax", (a,), vjp)


def layer_norm(a, gain, bias, eps=1e-5) -> Node:
    a, gain, bias = as_node(a), as_node(gain), as_node(bias)
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        dxhat = g * gain.value
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain.reshape(gain.value.shape), dbias.reshape(bias.value.shape)

    return _make(xhat * gain.value + bias.value, "layer_norm", (a, gain, bias), vjp)


def embedding(table, indices) -> Node:
    table = as_node(table)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.value.shape[0]):
        raise IndexError(
            f"embedding index out of range [0, {table.value.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )

    def vjp(g):
        buf = np.zeros_like(table.value)
        np.add.at(buf, idx, g)
        return (buf,)

    return _make(table.value[idx], "embedding", (table,), vjp)


def dropout(a, rate, rng=None) -> Node:
    """Inverted dropout: scale kept entries by 1/keep at train time so
    evaluation needs no rescale. `rng is None` or `rate == 0` is identity.
    """
    a = as_node(a)
    if rng is None or rate <= 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.value.shape) < keep).astype(a.value.dtype) / keep
    return mul(a, constant(mask, dtype=a.value.dtype))
