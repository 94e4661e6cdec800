"""Numba JIT kernels for the hot inner loops.

Same contracts as ``numpy_backend``; loop order is fixed so results are
bitwise reproducible run to run. All kernels are single-threaded: the desk
budgets assume one core and fixed accumulation order keeps training
deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from . import numpy_backend
from .numpy_backend import conv_out_size


@njit(cache=True)
def _pad_nchw(x, pad):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    return xp


@njit(cache=True)
def _conv2d_fwd(xp, w, stride, groups, oh, ow):
    n = xp.shape[0]
    cout, cig, kh, kw = w.shape
    cog = cout // groups
    y = np.zeros((n, cout, oh, ow), dtype=xp.dtype)
    for ni in range(n):
        for g in range(groups):
            for o in range(cog):
                oc = g * cog + o
                for i in range(oh):
                    acc = y[ni, oc, i]
                    for c in range(cig):
                        ic = g * cig + c
                        for a in range(kh):
                            row = xp[ni, ic, i * stride + a]
                            for b in range(kw):
                                wv = w[oc, c, a, b]
                                for j in range(ow):
                                    acc[j] += wv * row[b + j * stride]
    return y


@njit(cache=True)
def _conv2d_bwd_input(g, w, stride, groups, hp, wp):
    n = g.shape[0]
    cout, cig, kh, kw = w.shape
    cog = cout // groups
    oh, ow = g.shape[2], g.shape[3]
    dxp = np.zeros((n, groups * cig, hp, wp), dtype=g.dtype)
    for ni in range(n):
        for gi in range(groups):
            for o in range(cog):
                oc = gi * cog + o
                for i in range(oh):
                    grow = g[ni, oc, i]
                    for c in range(cig):
                        ic = gi * cig + c
                        for a in range(kh):
                            drow = dxp[ni, ic, i * stride + a]
                            for b in range(kw):
                                wv = w[oc, c, a, b]
                                for j in range(ow):
                                    drow[b + j * stride] += wv * grow[j]
    return dxp


@njit(cache=True)
def _conv2d_bwd_weight(g, xp, cig, kh, kw, stride, groups):
    n, cout = g.shape[0], g.shape[1]
    cog = cout // groups
    oh, ow = g.shape[2], g.shape[3]
    dw = np.zeros((cout, cig, kh, kw), dtype=g.dtype)
    for ni in range(n):
        for gi in range(groups):
            for o in range(cog):
                oc = gi * cog + o
                for i in range(oh):
                    grow = g[ni, oc, i]
                    for c in range(cig):
                        ic = gi * cig + c
                        for a in range(kh):
                            row = xp[ni, ic, i * stride + a]
                            for b in range(kw):
                                acc = dw[oc, c, a, b]
                                for j in range(ow):
                                    acc += grow[j] * row[b + j * stride]
                                dw[oc, c, a, b] = acc
    return dw


# Dense (groups == 1) convolutions are GEMM-shaped and BLAS outruns scalar
# loops on them by several x, so those route through the shared im2col path;
# the loop kernels own the gather/scatter-bound cases (grouped/depthwise).


def conv2d_forward(x, w, bias, stride, pad, groups):
    if groups == 1:
        return numpy_backend.conv2d_forward(x, w, bias, stride, pad, groups)
    oh = conv_out_size(x.shape[2], w.shape[2], stride, pad)
    ow = conv_out_size(x.shape[3], w.shape[3], stride, pad)
    xp = _pad_nchw(np.ascontiguousarray(x), pad)
    y = _conv2d_fwd(xp, np.ascontiguousarray(w), stride, groups, oh, ow)
    if bias is not None:
        y += bias[None, :, None, None]
    return y


def conv2d_backward_input(g, w, x_shape, stride, pad, groups):
    if groups == 1:
        return numpy_backend.conv2d_backward_input(g, w, x_shape, stride, pad, groups)
    _, _, h, wd = x_shape
    dxp = _conv2d_bwd_input(
        np.ascontiguousarray(g), np.ascontiguousarray(w), stride, groups,
        h + 2 * pad, wd + 2 * pad,
    )
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
    return dxp


def conv2d_backward_weight(g, x, w_shape, stride, pad, groups):
    if groups == 1:
        return numpy_backend.conv2d_backward_weight(g, x, w_shape, stride, pad, groups)
    _, cig, kh, kw = w_shape
    xp = _pad_nchw(np.ascontiguousarray(x), pad)
    return _conv2d_bwd_weight(np.ascontiguousarray(g), xp, cig, kh, kw, stride, groups)


@njit(cache=True)
def _lerp_index(out_size, in_size):
    i0 = np.zeros(out_size, dtype=np.int64)
    t = np.zeros(out_size, dtype=np.float64)
    if in_size == 1:
        return i0, t
    ratio = in_size / out_size
    for i in range(out_size):
        src = (i + 0.5) * ratio - 0.5
        lo = int(np.floor(src))
        if lo < 0:
            lo = 0
        elif lo > in_size - 2:
            lo = in_size - 2
        i0[i] = lo
        t[i] = src - lo
    return i0, t


@njit(cache=True)
def _bilinear_fwd(x, oh, ow):
    n, c, h, w = x.shape
    iy, ty = _lerp_index(oh, h)
    ix, tx = _lerp_index(ow, w)
    y = np.empty((n, c, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            plane = x[ni, ci]
            for i in range(oh):
                y0, wy = iy[i], ty[i]
                y1 = min(y0 + 1, h - 1)
                for j in range(ow):
                    x0, wx = ix[j], tx[j]
                    x1 = min(x0 + 1, w - 1)
                    top = plane[y0, x0] * (1.0 - wx) + plane[y0, x1] * wx
                    bot = plane[y1, x0] * (1.0 - wx) + plane[y1, x1] * wx
                    y[ni, ci, i, j] = top * (1.0 - wy) + bot * wy
    return y


@njit(cache=True)
def _bilinear_bwd(g, h, w):
    n, c, oh, ow = g.shape
    iy, ty = _lerp_index(oh, h)
    ix, tx = _lerp_index(ow, w)
    dx = np.zeros((n, c, h, w), dtype=g.dtype)
    for ni in range(n):
        for ci in range(c):
            plane = dx[ni, ci]
            for i in range(oh):
                y0, wy = iy[i], ty[i]
                y1 = min(y0 + 1, h - 1)
                for j in range(ow):
                    x0, wx = ix[j], tx[j]
                    x1 = min(x0 + 1, w - 1)
                    gv = g[ni, ci, i, j]
                    plane[y0, x0] += gv * (1.0 - wy) * (1.0 - wx)
                    plane[y0, x1] += gv * (1.0 - wy) * wx
                    plane[y1, x0] += gv * wy * (1.0 - wx)
                    plane[y1, x1] += gv * wy * wx
    return dx


def bilinear_forward(x, oh, ow):
    return _bilinear_fwd(np.ascontiguousarray(x), oh, ow)


def bilinear_backward(g, h, w):
    return _bilinear_bwd(np.ascontiguousarray(g), h, w)


@njit(cache=True)
def _rasterize(h, w, segments):
    layer = np.zeros((h, w), dtype=np.float64)
    for k in range(segments.shape[0]):
        x0, y0, x1, y1 = segments[k, 0], segments[k, 1], segments[k, 2], segments[k, 3]
        width, intensity = segments[k, 4], segments[k, 5]
        r = width / 2.0 + 0.5
        xmin = max(int(np.floor(min(x0, x1) - r)), 0)
        xmax = min(int(np.ceil(max(x0, x1) + r)) + 1, w)
        ymin = max(int(np.floor(min(y0, y1) - r)), 0)
        ymax = min(int(np.ceil(max(y0, y1) + r)) + 1, h)
        dxs, dys = x1 - x0, y1 - y0
        seg_len2 = dxs * dxs + dys * dys
        for yi in range(ymin, ymax):
            for xi in range(xmin, xmax):
                if seg_len2 > 0:
                    t = ((xi - x0) * dxs + (yi - y0) * dys) / seg_len2
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                else:
                    t = 0.0
                px = x0 + t * dxs
                py = y0 + t * dys
                dist = np.sqrt((xi - px) ** 2 + (yi - py) ** 2)
                cov = 0.5 + width / 2.0 - dist
                if cov > 1.0:
                    cov = 1.0
                if cov > 0.0:
                    layer[yi, xi] += intensity * cov
    return layer


def rasterize_streaks(h, w, segments):
    segs = np.ascontiguousarray(np.asarray(segments, dtype=np.float64).reshape(-1, 6))
    return _rasterize(h, w, segs)
