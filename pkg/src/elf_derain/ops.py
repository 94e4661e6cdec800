"""Differentiable primitives over :class:`~elf_derain.tensor.Tensor`.

Every op computes its numpy result, screens it for NaN/Inf, and (when a tape
is active and an input is live) records a closure ``backward_fn(g, need)``
returning one gradient per input; entries whose ``need`` flag is False may be
``None``. Heavy kernels (conv, bilinear) dispatch through
:mod:`elf_derain.kernels`.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import kernels as K
from .tensor import EngineError, Tensor, active_tape, check_finite


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    check_finite(op, data)
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(tape.is_live(t) for t in inputs):
        tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise EngineError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    data = a.data + b.data

    def bwd(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(g, b.shape) if need[1] else None)

    return _make("add", data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    data = a.data - b.data

    def bwd(g, need):
        return (_unbroadcast(g, a.shape) if need[0] else None,
                _unbroadcast(-g, b.shape) if need[1] else None)

    return _make("sub", data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    data = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g, need):
        return (_unbroadcast(g * bd, a.shape) if need[0] else None,
                _unbroadcast(g * ad, b.shape) if need[1] else None)

    return _make("mul", data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    if (b.data == 0).any():
        raise EngineError("div: division by exact zero")
    data = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g, need):
        return (_unbroadcast(g / bd, a.shape) if need[0] else None,
                _unbroadcast(-g * ad / (bd * bd), b.shape) if need[1] else None)

    return _make("div", data, (a, b), bwd)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data < 0).any():
        raise EngineError("sqrt: negative input")
    data = np.sqrt(a.data)
    out_data = data

    def bwd(g, need):
        # relies on sqrt inputs staying away from 0 (Charbonnier adds eps**2)
        return (g / (2.0 * out_data),)

    return _make("sqrt", data, (a,), bwd)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    data = a.data * np.asarray(s, dtype=a.dtype) if s != 1.0 else a.data.copy()

    def bwd(g, need):
        return (g * np.asarray(s, dtype=g.dtype),)

    return _make("scale", data, (a,), bwd)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g, need):
        return (g * mask,)

    return _make("clamp", data, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))
    y = data

    def bwd(g, need):
        return (g * y * (1.0 - y),)

    return _make("sigmoid", data, (a,), bwd)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0)
    mask = a.data > 0

    def bwd(g, need):
        return (g * mask,)

    return _make("relu", data, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-form GELU; smooth everywhere so finite differences stay clean."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    data = 0.5 * x * (1.0 + th)

    def bwd(g, need):
        sech2 = 1.0 - th * th
        d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * d,)

    return _make("gelu", data, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise EngineError("matmul: operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise EngineError(f"matmul: inner dims {a.shape[-1]} vs {b.shape[-2]} differ")
    data = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def bwd(g, need):
        ga = gb = None
        if need[0]:
            ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), a.shape)
        if need[1]:
            gb = _unbroadcast(np.matmul(ad.swapaxes(-1, -2), g), b.shape)
        return (ga, gb)

    return _make("matmul", data, (a, b), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise EngineError(f"softmax: axis {axis} invalid for rank {a.ndim}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    y = data

    def bwd(g, need):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make("softmax", data, (a,), bwd)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)
    in_shape = a.shape

    def bwd(g, need):
        return (g.reshape(in_shape),)

    return _make("reshape", np.ascontiguousarray(data), (a,), bwd)


def permute(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bwd(g, need):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make("permute", data, (a,), bwd)


def transpose_last2(a) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return permute(a, axes)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if len(ts) < 1:
        raise EngineError("concat: needs at least one tensor")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, need):
        parts = np.split(g, splits, axis=axis)
        return tuple(np.ascontiguousarray(p) if n else None for p, n in zip(parts, need))

    return _make("concat", data, ts, bwd)


def slice_(a, slices) -> Tensor:
    a = _as_tensor(a)
    data = np.ascontiguousarray(a.data[slices])
    in_shape = a.shape

    def bwd(g, need):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[slices] = g
        return (full,)

    return _make("slice", data, (a,), bwd)


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the two trailing (spatial) axes symmetrically."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise EngineError("pad2d: needs rank >= 2")
    if pad < 0:
        raise EngineError("pad2d: negative padding")
    width = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    data = np.pad(a.data, width)

    def bwd(g, need):
        sl = (Ellipsis, slice(pad, g.shape[-2] - pad), slice(pad, g.shape[-1] - pad))
        return (np.ascontiguousarray(g[sl]),)

    return _make("pad2d", data, (a,), bwd)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape

    def bwd(g, need):
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, in_shape).copy() if gg.shape != in_shape
                else np.ascontiguousarray(gg),)

    return _make("sum", np.asarray(data), (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    count = a.size if axis is None else np.prod(
        [in_shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])

    def bwd(g, need):
        gg = g / count
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, in_shape).copy(),)

    return _make("mean", np.asarray(data), (a,), bwd)


def global_avg_pool(a) -> Tensor:
    """(N, C, H, W) -> (N, C, 1, 1) spatial mean."""
    a = _as_tensor(a)
    if a.ndim != 4:
        raise EngineError("global_avg_pool: expects NCHW input")
    return mean(a, axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# convolution / resampling
# ---------------------------------------------------------------------------

def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    x, w = _as_tensor(x), _as_tensor(w)
    b = _as_tensor(bias) if bias is not None else None
    if x.ndim != 4 or w.ndim != 4:
        raise EngineError("conv2d: x must be NCHW and w must be (Cout, Cin/g, kh, kw)")
    n, cin, h, wd = x.shape
    cout, cig, kh, kw = w.shape
    if stride < 1 or padding < 0:
        raise EngineError("conv2d: stride must be >= 1 and padding >= 0")
    if cin % groups != 0 or cout % groups != 0 or cig != cin // groups:
        raise EngineError(
            f"conv2d: channel/group mismatch (Cin={cin}, Cout={cout}, groups={groups}, "
            f"kernel expects Cin/g={cig})")
    if b is not None and b.shape != (cout,):
        raise EngineError(f"conv2d: bias shape {b.shape} != ({cout},)")
    try:
        K.conv_out_size(h, kh, stride, padding)
        K.conv_out_size(wd, kw, stride, padding)
    except ValueError as exc:
        raise EngineError(str(exc)) from exc

    data = K.conv2d_forward(x.data, w.data, b.data if b is not None else None,
                            stride, padding, groups)
    xd, wdat = x.data, w.data
    x_shape, w_shape = x.shape, w.shape
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g, need):
        gx = K.conv2d_backward_input(g, wdat, x_shape, stride, padding, groups) if need[0] else None
        gw = K.conv2d_backward_weight(g, xd, w_shape, stride, padding, groups) if need[1] else None
        if b is None:
            return (gx, gw)
        gb = g.sum(axis=(0, 2, 3)) if need[2] else None
        return (gx, gw, gb)

    return _make("conv2d", data, inputs, bwd)


def bilinear_resize(x, scale=None, size=None) -> Tensor:
    """Half-pixel-center bilinear resize of the spatial axes.

    Exactly one of ``scale`` (rational, applied to H and W) or ``size``
    ((out_h, out_w)) must be given. Border samples extrapolate linearly, so
    constant and affine images are reproduced exactly at any scale.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise EngineError("bilinear_resize: expects NCHW input")
    n, c, h, w = x.shape
    if (scale is None) == (size is None):
        raise EngineError("bilinear_resize: give exactly one of scale or size")
    if scale is not None:
        oh_f, ow_f = h * scale, w * scale
        oh, ow = int(round(oh_f)), int(round(ow_f))
        if abs(oh_f - oh) > 1e-9 or abs(ow_f - ow) > 1e-9:
            raise EngineError(
                f"bilinear_resize: scale {scale} of ({h}, {w}) is not integral")
    else:
        oh, ow = size
    if oh < 1 or ow < 1:
        raise EngineError(f"bilinear_resize: non-positive target size ({oh}, {ow})")

    data = K.bilinear_forward(x.data, oh, ow)

    def bwd(g, need):
        return (K.bilinear_backward(g, h, w),)

    return _make("bilinear_resize", data, (x,), bwd)


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Populate gradients of every live leaf reachable from ``root``.

    ``root`` must be a single-element tensor recorded on the active tape.
    Nodes are replayed in strict reverse append order; a tensor consumed k
    times accumulates the sum of its k contributions.
    """
    tape = active_tape()
    if tape is None:
        raise EngineError("backward: no active tape")
    if root.node_id is None:
        raise EngineError("backward: tensor is not on the active tape")
    if root.size != 1:
        raise EngineError(f"backward: root must be scalar, got shape {root.shape}")

    grads: dict[int, np.ndarray] = {
        root.node_id: np.ones_like(root.data)
    }
    live = tape.live
    for node in reversed(tape.nodes):
        g = grads.pop(node.output_id, None)
        if g is None:
            continue
        need = tuple(nid in live for nid in node.input_ids)
        in_grads = node.backward_fn(g, need)
        for nid, ig in zip(node.input_ids, in_grads):
            if ig is None:
                continue
            acc = grads.get(nid)
            # closures may hand back aliased arrays (e.g. add returns the
            # upstream gradient for both inputs), so never mutate in place
            grads[nid] = ig if acc is None else acc + ig
    for nid, t in tape.leaves.items():
        if not t.requires_grad:
            continue
        g = grads.get(nid)
        if g is None:
            continue
        if g.shape != t.shape:
            raise EngineError(f"backward: gradient shape {g.shape} != leaf shape {t.shape}")
        if t.grad is None:
            t.grad = g.astype(t.dtype, copy=True)
        else:
            t.grad += g
