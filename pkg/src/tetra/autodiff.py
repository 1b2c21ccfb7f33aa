"""Minimal reverse-mode autodiff on numpy arrays.

A :class:`Tape` records every operation as a node (op name, parent ids,
cached value, backward closure). Because nodes can only consume values that
already exist, insertion order is a topological order, so the backward pass
is a single reverse sweep that visits each node at most once.

Straight-through nodes implement the quantization-aware training rules:
the ternary blend masks weight gradients by ``|w| <= gamma``, while the
activation-quant and sign nodes pass gradients through unchanged.

All values are float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantize import act_dequantize, act_quantize, ternary_dequantize, ternary_quantize


class Node:
    __slots__ = ("op", "value", "parents", "vjp")

    def __init__(self, op, value, parents, vjp):
        self.op = op
        self.value = value
        self.parents = parents
        self.vjp = vjp  # grad_out -> tuple of parent grads; None for leaves


@dataclass(frozen=True)
class Var:
    """Handle to a tape node."""

    tape: "Tape"
    nid: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self, tape=self.tape)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Append-only op graph with gradient buffers keyed by node id."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, op, value, parents, vjp) -> Var:
        self.nodes.append(Node(op, np.asarray(value, dtype=np.float64), parents, vjp))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, op="leaf") -> Var:
        return self._push(op, value, (), None)

    def const(self, value) -> Var:
        return self._push("const", value, (), None)


def _as_var(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("mixing variables from different tapes")
        return x
    return tape.const(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one argument must be a Var")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss; returns gradients keyed by node id."""
    if loss.value.size != 1:
        raise ValueError("loss must be scalar")
    grads: dict[int, np.ndarray] = {loss.nid: np.ones_like(loss.value)}
    for nid in range(loss.nid, -1, -1):
        g = grads.get(nid)
        node = tape.nodes[nid]
        if g is None or node.vjp is None:
            continue
        for pid, pg in zip(node.parents, node.vjp(g)):
            if pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return grads


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b, tape=None):
    tape = tape or _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)
    av, bv = a.value, b.value
    return tape._push(
        "add", av + bv, (a.nid, b.nid),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
    )


def sub(a, b, tape=None):
    tape = tape or _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)
    av, bv = a.value, b.value
    return tape._push(
        "sub", av - bv, (a.nid, b.nid),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
    )


def mul(a, b, tape=None):
    tape = tape or _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)
    av, bv = a.value, b.value
    return tape._push(
        "mul", av * bv, (a.nid, b.nid),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b, tape=None):
    tape = tape or _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)
    av, bv = a.value, b.value
    return tape._push(
        "div", av / bv, (a.nid, b.nid),
        lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape),
        ),
    )


def matmul(a, b, tape=None):
    tape = tape or _tape_of(a, b)
    a, b = _as_var(tape, a), _as_var(tape, b)
    av, bv = a.value, b.value
    return tape._push(
        "matmul", av @ bv, (a.nid, b.nid),
        lambda g: (g @ bv.T, av.T @ g),
    )


def transpose(a):
    av = a.value
    return a.tape._push("transpose", av.T, (a.nid,), lambda g: (g.T,))


def sum_(a, axis=None, keepdims=False):
    av = a.value

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, av.shape).copy(),)

    return a.tape._push("sum", av.sum(axis=axis, keepdims=keepdims), (a.nid,), vjp)


def mean_(a, axis=None, keepdims=False):
    av = a.value
    count = av.size if axis is None else av.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, av.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, av.shape).copy(),)

    return a.tape._push("mean", av.mean(axis=axis, keepdims=keepdims), (a.nid,), vjp)


def exp(a):
    out = np.exp(a.value)
    return a.tape._push("exp", out, (a.nid,), lambda g: (g * out,))


def log(a):
    av = a.value
    return a.tape._push("log", np.log(av), (a.nid,), lambda g: (g / av,))


def tanh(a):
    out = np.tanh(a.value)
    return a.tape._push("tanh", out, (a.nid,), lambda g: (g * (1.0 - out * out),))


def sqrt(a):
    out = np.sqrt(a.value)
    return a.tape._push("sqrt", out, (a.nid,), lambda g: (g / (2.0 * out),))


def clip_min(a, floor: float):
    av = a.value
    mask = av >= floor
    return a.tape._push("clip_min", np.maximum(av, floor), (a.nid,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """GELU, tanh approximation (deterministic across platforms)."""
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return a.tape._push("gelu", 0.5 * x * (1.0 + t), (a.nid,), vjp)


def softmax(a, axis=-1):
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return a.tape._push("softmax", y, (a.nid,), vjp)


def layernorm(x, scale, shift, eps: float = 1e-5):
    """Layer normalization over the last axis with affine parameters."""
    tape = _tape_of(x, scale, shift)
    x, scale, shift = (_as_var(tape, v) for v in (x, scale, shift))
    xv, sv = x.value, scale.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    lead = tuple(range(xv.ndim - 1))

    def vjp(g):
        dxhat = g * sv
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dscale = (g * xhat).sum(axis=lead) if lead else g * xhat
        dshift = g.sum(axis=lead) if lead else g
        return (dx, dscale, dshift)

    return tape._push(
        "layernorm", xhat * sv + shift.value, (x.nid, scale.nid, shift.nid), vjp
    )


# ---------------------------------------------------------------------------
# shape surgery
# ---------------------------------------------------------------------------


def slice_cols(a, lo: int, hi: int):
    av = a.value

    def vjp(g):
        full = np.zeros_like(av)
        full[:, lo:hi] = g
        return (full,)

    return a.tape._push("slice_cols", av[:, lo:hi], (a.nid,), vjp)


def slice_rows(a, lo: int, hi: int):
    av = a.value

    def vjp(g):
        full = np.zeros_like(av)
        full[lo:hi] = g
        return (full,)

    return a.tape._push("slice_rows", av[lo:hi], (a.nid,), vjp)


def concat_cols(parts):
    tape = parts[0].tape
    values = [p.value for p in parts]
    splits = np.cumsum([v.shape[1] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    return tape._push(
        "concat_cols", np.concatenate(values, axis=1), tuple(p.nid for p in parts), vjp
    )


def concat_rows(parts):
    tape = parts[0].tape
    values = [p.value for p in parts]
    splits = np.cumsum([v.shape[0] for v in values])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=0))

    return tape._push(
        "concat_rows", np.concatenate(values, axis=0), tuple(p.nid for p in parts), vjp
    )


# ---------------------------------------------------------------------------
# straight-through estimator nodes
# ---------------------------------------------------------------------------


def ste_ternary_blend(w: Var, lam: float):
    """Progressive ternary weights with the straight-through backward rule.

    Forward is ``(1 - lam) * w + lam * dequant(quant(w))``; backward scales
    the quantized branch by the mask ``|w| <= gamma`` instead of the true
    (zero almost everywhere) derivative.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    wv = w.value
    t = ternary_quantize(wv)
    out = (1.0 - lam) * wv + lam * ternary_dequantize(t)
    mask = np.abs(wv) <= t.gamma

    def vjp(g):
        return (g * ((1.0 - lam) + lam * mask),)

    return w.tape._push("ste_ternary", out, (w.nid,), vjp)


def ste_act_blend(x: Var, lam: float):
    """Progressive fake-quantized activations; backward is the identity."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    xv = x.value
    if lam == 0.0:
        out = xv
    else:
        out = (1.0 - lam) * xv + lam * act_dequantize(act_quantize(xv))
    return x.tape._push("ste_act", out, (x.nid,), lambda g: (g,))


def ste_sign(y: Var):
    """Sign binarization to +-1 (0 maps to -1); backward is the identity."""
    yv = y.value
    out = np.where(yv > 0, 1.0, -1.0)
    return y.tape._push("ste_sign", out, (y.nid,), lambda g: (g,))
