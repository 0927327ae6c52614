"""Minimal reverse-mode differentiation tape.

A :class:`Tape` records primitive operations as they execute (define-by-run);
:func:`backward` replays the records once, in reverse, accumulating adjoints.
Each op below dispatches: called on plain numpy arrays it just computes, called
on at least one :class:`Var` it also records a node, so forward code can be
written once and reused for both inference and training.

Shape discipline: elementwise ops require identical shapes, except that one
operand may be a scalar. Any other shape change goes through an explicit op
(:func:`expand`, :func:`reshape`, :func:`concat`, ...), which keeps adjoint
bookkeeping trivial and rules out silent broadcasting bugs.
"""

from __future__ import annotations

import sys
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidInput, NumericalFailure

ArrayLike = Union[np.ndarray, float, int, "Var"]


class Var:
    """A value recorded on a tape; ``constant`` values accumulate no adjoint."""

    __slots__ = ("tape", "data", "index", "constant")

    def __init__(self, tape: "Tape", data: np.ndarray, index: int, constant: bool):
        self.tape = tape
        self.data = data
        self.index = index
        self.constant = constant

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

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

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        kind = "const" if self.constant else "var"
        return f"Var({kind}, shape={self.data.shape}, node={self.index})"


class _Node:
    __slots__ = ("var", "input_indices", "inputs", "vjp")

    def __init__(self, var, input_indices, inputs, vjp):
        self.var = var
        self.input_indices = input_indices
        self.inputs = inputs
        self.vjp = vjp  # None for leaves/constants


class Tape:
    """Append-only record of primitive operations, topological by construction."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, data) -> Var:
        """Record a differentiable leaf (a parameter)."""
        return self._append(np.asarray(data, dtype=np.float64), (), None, constant=False)

    def const(self, data) -> Var:
        """Record a constant; its adjoint is never accumulated."""
        return self._append(np.asarray(data, dtype=np.float64), (), None, constant=True)

    def _append(self, data, inputs, vjp, constant=False) -> Var:
        if not np.all(np.isfinite(data)):
            if vjp is None:
                raise InvalidInput("non-finite values entered the tape")
            op = sys._getframe(1).f_code.co_name
            raise NumericalFailure(f"non-finite values produced by tape op {op!r}")
        var = Var(self, data, len(self.nodes), constant)
        self.nodes.append(_Node(var, tuple(v.index for v in inputs), tuple(inputs), vjp))
        return var


class Gradients:
    """Adjoints of one backward pass, addressable by the forward Vars."""

    def __init__(self, tape: Tape, adjoints: list):
        self._tape = tape
        self._adjoints = adjoints

    def wrt(self, var: Var) -> np.ndarray:
        """Gradient of the seed with respect to ``var`` (zeros if unreachable)."""
        adj = self._adjoints[var.index]
        if adj is None:
            return np.zeros_like(var.data)
        return adj


def backward(tape: Tape, seed: Var) -> Gradients:
    """Accumulate adjoints of a recorded scalar through the whole tape.

    Visits every node exactly once, in reverse recording order, which makes
    gradient values independent of anything but the recorded computation.
    """
    if seed.tape is not tape:
        raise InvalidInput("seed was recorded on a different tape")
    if seed.data.shape != ():
        raise InvalidInput(f"seed must be scalar, got shape {seed.data.shape}")
    adjoints: list[Optional[np.ndarray]] = [None] * len(tape.nodes)
    adjoints[seed.index] = np.ones(())
    for node in reversed(tape.nodes):
        out_adj = adjoints[node.var.index]
        if out_adj is None or node.vjp is None:
            continue
        grads = node.vjp(out_adj)
        for inp, grad in zip(node.inputs, grads):
            if grad is None or inp.constant:
                continue
            if adjoints[inp.index] is None:
                adjoints[inp.index] = np.zeros_like(inp.data)
            adjoints[inp.index] += grad
    return Gradients(tape, adjoints)


# ---------------------------------------------------------------------------
# dispatch helpers


def _find_tape(*args) -> Optional[Tape]:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _data(a) -> np.ndarray:
    if isinstance(a, Var):
        return a.data
    return np.asarray(a, dtype=np.float64)


def _as_var(tape: Tape, a) -> Var:
    if isinstance(a, Var):
        if a.tape is not tape:
            raise InvalidInput("operands live on different tapes")
        return a
    return tape.const(a)


def _check_elementwise(x: np.ndarray, y: np.ndarray, opname: str):
    if x.shape == y.shape or x.shape == () or y.shape == ():
        return
    raise InvalidInput(
        f"{opname} requires equal shapes or a scalar operand, got {x.shape} and {y.shape}"
    )


def _reduce_if_scalar(grad: np.ndarray, ref: np.ndarray) -> np.ndarray:
    # Scalar operands collect the full adjoint sum.
    if ref.shape == () and grad.shape != ():
        return np.sum(grad)
    return grad


def custom(inputs: Sequence[ArrayLike], out_data: np.ndarray, vjp: Callable) -> Var:
    """Record a custom node. ``vjp(out_adjoint)`` must return one gradient
    (or None) per input, in order."""
    tape = _find_tape(*inputs)
    if tape is None:
        raise InvalidInput("custom nodes need at least one tape-recorded input")
    vars_ = [_as_var(tape, a) for a in inputs]
    return tape._append(np.asarray(out_data, dtype=np.float64), vars_, vjp)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    xa, xb = _data(a), _data(b)
    _check_elementwise(xa, xb, "add")
    tape = _find_tape(a, b)
    if tape is None:
        return xa + xb
    va, vb = _as_var(tape, a), _as_var(tape, b)
    return tape._append(
        xa + xb,
        (va, vb),
        lambda g: (_reduce_if_scalar(g, xa), _reduce_if_scalar(g, xb)),
    )


def sub(a, b):
    xa, xb = _data(a), _data(b)
    _check_elementwise(xa, xb, "sub")
    tape = _find_tape(a, b)
    if tape is None:
        return xa - xb
    va, vb = _as_var(tape, a), _as_var(tape, b)
    return tape._append(
        xa - xb,
        (va, vb),
        lambda g: (_reduce_if_scalar(g, xa), _reduce_if_scalar(-g, xb)),
    )


def neg(a):
    tape = _find_tape(a)
    if tape is None:
        return -_data(a)
    va = _as_var(tape, a)
    return tape._append(-va.data, (va,), lambda g: (-g,))


def mul(a, b):
    xa, xb = _data(a), _data(b)
    _check_elementwise(xa, xb, "mul")
    tape = _find_tape(a, b)
    if tape is None:
        return xa * xb
    va, vb = _as_var(tape, a), _as_var(tape, b)
    return tape._append(
        xa * xb,
        (va, vb),
        lambda g: (_reduce_if_scalar(g * xb, xa), _reduce_if_scalar(g * xa, xb)),
    )


def div(a, b):
    xa, xb = _data(a), _data(b)
    _check_elementwise(xa, xb, "div")
    tape = _find_tape(a, b)
    if tape is None:
        return xa / xb
    va, vb = _as_var(tape, a), _as_var(tape, b)
    return tape._append(
        xa / xb,
        (va, vb),
        lambda g: (
            _reduce_if_scalar(g / xb, xa),
            _reduce_if_scalar(-g * xa / (xb * xb), xb),
        ),
    )


def matmul(a, b):
    xa, xb = _data(a), _data(b)
    if xa.ndim < 2 or xb.ndim < 2:
        raise InvalidInput("matmul operands must have at least 2 dimensions")
    if xa.shape[:-2] != xb.shape[:-2] and xa.ndim != 2 and xb.ndim != 2:
        raise InvalidInput(f"matmul batch dims differ: {xa.shape} vs {xb.shape}")
    if xa.shape[-1] != xb.shape[-2]:
        raise InvalidInput(f"matmul inner dims differ: {xa.shape} vs {xb.shape}")
    tape = _find_tape(a, b)
    if tape is None:
        return xa @ xb
    va, vb = _as_var(tape, a), _as_var(tape, b)

    def vjp(g):
        ga = g @ np.swapaxes(xb, -1, -2)
        gb = np.swapaxes(xa, -1, -2) @ g
        # A 2-d operand against a stacked one collects adjoints over the stack.
        if xa.ndim == 2 and ga.ndim > 2:
            ga = ga.sum(axis=tuple(range(ga.ndim - 2)))
        if xb.ndim == 2 and gb.ndim > 2:
            gb = gb.sum(axis=tuple(range(gb.ndim - 2)))
        return ga, gb

    return tape._append(xa @ xb, (va, vb), vjp)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (B, C, H, W) -> (C*kh*kw, B*H'*W') for stride-1 valid convolution
    B, C, H, W = x.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # win: (B, C, Ho, Wo, kh, kw) -> (C, kh, kw, B, Ho, Wo)
    col = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, B * Ho * Wo)
    return np.ascontiguousarray(col)


def _conv2d_raw(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    B, C, H, W = x.shape
    Co, Ci, kh, kw = k.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    col = _im2col(x, kh, kw)
    out = k.reshape(Co, Ci * kh * kw) @ col
    return out.reshape(Co, B, Ho, Wo).transpose(1, 0, 2, 3)


def conv2d(x, k):
    """Stride-1 valid 2-d convolution (cross-correlation) of ``(B, Ci, H, W)``
    input with ``(Co, Ci, kh, kw)`` kernels."""
    xd, kd = _data(x), _data(k)
    if xd.ndim != 4 or kd.ndim != 4:
        raise InvalidInput("conv2d expects (B, Ci, H, W) input and (Co, Ci, kh, kw) kernel")
    B, C, H, W = xd.shape
    Co, Ci, kh, kw = kd.shape
    if C != Ci or kh > H or kw > W:
        raise InvalidInput(f"conv2d shapes incompatible: input {xd.shape}, kernel {kd.shape}")
    tape = _find_tape(x, k)
    if tape is None:
        return _conv2d_raw(xd, kd)
    vx, vk = _as_var(tape, x), _as_var(tape, k)
    Ho, Wo = H - kh + 1, W - kw + 1

    def vjp(g):
        # g: (B, Co, Ho, Wo)
        col = _im2col(xd, kh, kw)
        gmat = g.transpose(1, 0, 2, 3).reshape(Co, B * Ho * Wo)
        gk = (gmat @ col.T).reshape(Co, Ci, kh, kw)
        # dx: full correlation of g with the flipped kernel
        gpad = np.zeros((B, Co, H + kh - 1, W + kw - 1))
        gpad[:, :, kh - 1 : kh - 1 + Ho, kw - 1 : kw - 1 + Wo] = g
        kflip = kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)  # (Ci, Co, kh, kw)
        gx = _conv2d_raw(gpad, kflip)
        return gx, gk

    return tape._append(_conv2d_raw(xd, kd), (vx, vk), vjp)


def sigmoid(a):
    x = _data(a)
    ez = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    tape = _find_tape(a)
    if tape is None:
        return out
    va = _as_var(tape, a)
    return tape._append(out, (va,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    x = _data(a)
    out = np.tanh(x)
    tape = _find_tape(a)
    if tape is None:
        return out
    va = _as_var(tape, a)
    return tape._append(out, (va,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    x = _data(a)
    out = np.maximum(x, 0.0)
    tape = _find_tape(a)
    if tape is None:
        return out
    va = _as_var(tape, a)
    return tape._append(out, (va,), lambda g: (g * (x > 0.0),))


def exp(a):
    x = _data(a)
    out = np.exp(x)
    tape = _find_tape(a)
    if tape is None:
        return out
    va = _as_var(tape, a)
    return tape._append(out, (va,), lambda g: (g * out,))


def log(a):
    x = _data(a)
    tape = _find_tape(a)
    if tape is None:
        return np.log(x)
    va = _as_var(tape, a)
    return tape._append(np.log(x), (va,), lambda g: (g / x,))


def sqrt(a):
    x = _data(a)
    out = np.sqrt(x)
    tape = _find_tape(a)
    if tape is None:
        return out
    va = _as_var(tape, a)
    return tape._append(out, (va,), lambda g: (g * 0.5 / out,))


def _softmax_raw(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a):
    """Row-stable softmax over the last axis."""
    x = _data(a)
    out = _softmax_raw(x)
    tape = _find_tape(a)
    if tape is None:
        return out

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    va = _as_var(tape, a)
    return tape._append(out, (va,), vjp)


def log_softmax(a):
    """Row-stable log-softmax over the last axis."""
    x = _data(a)
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    tape = _find_tape(a)
    if tape is None:
        return out
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    va = _as_var(tape, a)
    return tape._append(out, (va,), vjp)


def concat(items: Sequence[ArrayLike], axis: int = 0):
    datas = [_data(a) for a in items]
    tape = _find_tape(*items)
    out = np.concatenate(datas, axis=axis)
    if tape is None:
        return out
    vars_ = [_as_var(tape, a) for a in items]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis) for i in range(len(sizes))
        )

    return tape._append(out, vars_, vjp)


def slice_(a, key):
    """Basic slicing (a tuple of ints/slices); adjoint scatters back."""
    x = _data(a)
    out = x[key]
    tape = _find_tape(a)
    if tape is None:
        return out.copy()
    va = _as_var(tape, a)

    def vjp(g):
        gx = np.zeros_like(x)
        gx[key] = g
        return (gx,)

    return tape._append(np.ascontiguousarray(out), (va,), vjp)


def reshape(a, shape):
    x = _data(a)
    tape = _find_tape(a)
    if tape is None:
        return x.reshape(shape)
    va = _as_var(tape, a)
    return tape._append(x.reshape(shape), (va,), lambda g: (g.reshape(x.shape),))


def transpose(a, axes=None):
    x = _data(a)
    tape = _find_tape(a)
    if tape is None:
        return np.transpose(x, axes)
    va = _as_var(tape, a)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return tape._append(
        np.transpose(x, axes).copy(), (va,), lambda g: (np.transpose(g, inv),)
    )


def expand(a, shape):
    """Explicit broadcast to ``shape``; the adjoint sums over expanded axes."""
    x = _data(a)
    out = np.broadcast_to(x, shape)
    tape = _find_tape(a)
    if tape is None:
        return np.ascontiguousarray(out)
    va = _as_var(tape, a)
    pad = len(shape) - x.ndim
    padded = (1,) * pad + x.shape
    axes = tuple(i for i in range(len(shape)) if padded[i] == 1 and shape[i] != 1)

    def vjp(g):
        gx = g.sum(axis=axes, keepdims=True) if axes else g
        return (gx.reshape(x.shape),)

    return tape._append(np.ascontiguousarray(out), (va,), vjp)


def mean(a, axis=None):
    x = _data(a)
    out = x.mean(axis=axis)
    tape = _find_tape(a)
    if tape is None:
        return out
    va = _as_var(tape, a)
    count = x.size if axis is None else x.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.full_like(x, 1.0 / count) * g,)
        g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, x.shape) / count,)

    return tape._append(np.asarray(out), (va,), vjp)


def sum_(a, axis=None):
    x = _data(a)
    out = x.sum(axis=axis)
    tape = _find_tape(a)
    if tape is None:
        return out
    va = _as_var(tape, a)

    def vjp(g):
        if axis is None:
            return (np.full_like(x, 1.0) * g,)
        g_exp = np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, x.shape).copy(),)

    return tape._append(np.asarray(out), (va,), vjp)


def gather_rows(a, index):
    """Select rows of a 2-d array by an integer index vector."""
    x = _data(a)
    idx = np.asarray(index)
    if x.ndim != 2 or idx.ndim != 1:
        raise InvalidInput("gather_rows expects a 2-d array and a 1-d index")
    out = x[idx]
    tape = _find_tape(a)
    if tape is None:
        return out
    va = _as_var(tape, a)

    def vjp(g):
        gx = np.zeros_like(x)
        np.add.at(gx, idx, g)
        return (gx,)

    return tape._append(out, (va,), vjp)


def segment_sum(a, segment_ids, num_segments: int):
    """Sum rows of a 2-d array into ``num_segments`` buckets (deterministic
    sequential accumulation)."""
    x = _data(a)
    ids = np.asarray(segment_ids)
    if x.ndim != 2 or ids.ndim != 1 or ids.shape[0] != x.shape[0]:
        raise InvalidInput("segment_sum expects (R, C) rows and R segment ids")
    out = np.zeros((num_segments, x.shape[1]))
    np.add.at(out, ids, x)
    tape = _find_tape(a)
    if tape is None:
        return out
    va = _as_var(tape, a)
    return tape._append(out, (va,), lambda g: (g[ids],))
