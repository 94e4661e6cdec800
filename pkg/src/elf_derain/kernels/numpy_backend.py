"""Pure-numpy reference kernels.

Convolutions run as im2col views feeding one BLAS matmul (einsum for grouped
kernels); bilinear resampling is expressed as two small dense interpolation
matrices. These are the fallback implementations behind the numba versions in
``numba_backend`` and must stay observationally identical up to float rounding.
"""

from __future__ import annotations

import numpy as np


def conv_out_size(extent: int, k: int, stride: int, pad: int) -> int:
    """Output extent of a convolution; the division must be exact."""
    span = extent + 2 * pad - k
    if span < 0 or span % stride != 0:
        raise ValueError(
            f"conv2d: extent {extent} with kernel {k}, stride {stride}, pad {pad} "
            f"does not divide exactly"
        )
    return span // stride + 1


def _pad_nchw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _patches(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Read-only (N, C, kh, kw, OH, OW) sliding-window view of a padded input."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )


def conv2d_forward(x, w, bias, stride, pad, groups):
    n, cin, h, wd = x.shape
    cout, cig, kh, kw = w.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(wd, kw, stride, pad)
    xp = _pad_nchw(x, pad)
    pat = _patches(xp, kh, kw, stride, oh, ow)
    if groups == 1:
        cols = np.ascontiguousarray(pat).reshape(n, cin * kh * kw, oh * ow)
        y = np.matmul(w.reshape(cout, -1), cols).reshape(n, cout, oh, ow)
    else:
        cog = cout // groups
        pat_g = pat.reshape(n, groups, cig, kh, kw, oh, ow)
        w_g = w.reshape(groups, cog, cig, kh, kw)
        y = np.einsum("ngcabij,gocab->ngoij", pat_g, w_g, optimize=True)
        y = y.reshape(n, cout, oh, ow)
    if bias is not None:
        y = y + bias[None, :, None, None]
    return np.ascontiguousarray(y)


def conv2d_backward_input(g, w, x_shape, stride, pad, groups):
    n, cin, h, wd = x_shape
    cout, cig, kh, kw = w.shape
    _, _, oh, ow = g.shape
    dxp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    cog = cout // groups
    g_g = g.reshape(n, groups, cog, oh, ow)
    w_g = w.reshape(groups, cog, cig, kh, kw)
    for a in range(kh):
        for b in range(kw):
            if groups == 1:
                term = np.einsum("noij,oc->ncij", g, w[:, :, a, b], optimize=True)
            else:
                term = np.einsum("ngoij,goc->ngcij", g_g, w_g[:, :, :, a, b], optimize=True)
                term = term.reshape(n, cin, oh, ow)
            dxp[:, :, a : a + stride * oh : stride, b : b + stride * ow : stride] += term
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:-pad, pad:-pad])
    return dxp


def conv2d_backward_weight(g, x, w_shape, stride, pad, groups):
    cout, cig, kh, kw = w_shape
    n, cin, h, wd = x.shape
    _, _, oh, ow = g.shape
    xp = _pad_nchw(x, pad)
    pat = _patches(xp, kh, kw, stride, oh, ow)
    if groups == 1:
        dw = np.einsum("ncabij,noij->ocab", pat, g, optimize=True)
    else:
        cog = cout // groups
        pat_g = pat.reshape(n, groups, cig, kh, kw, oh, ow)
        g_g = g.reshape(n, groups, cog, oh, ow)
        dw = np.einsum("ngcabij,ngoij->gocab", pat_g, g_g, optimize=True)
        dw = dw.reshape(cout, cig, kh, kw)
    return np.ascontiguousarray(dw)


def _lerp_matrix(out_size: int, in_size: int, dtype) -> np.ndarray:
    """Dense (out, in) half-pixel-center interpolation matrix.

    Border samples extrapolate linearly (weights may leave [0, 1]) so that
    affine signals are reproduced exactly at every scale.
    """
    m = np.zeros((out_size, in_size), dtype=dtype)
    if in_size == 1:
        m[:, 0] = 1.0
        return m
    ratio = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * ratio - 0.5
    i0 = np.clip(np.floor(src).astype(np.int64), 0, in_size - 2)
    t = src - i0
    m[np.arange(out_size), i0] = (1.0 - t).astype(dtype)
    m[np.arange(out_size), i0 + 1] = t.astype(dtype)
    return m


def bilinear_forward(x, oh, ow):
    n, c, h, w = x.shape
    ah = _lerp_matrix(oh, h, x.dtype)
    aw = _lerp_matrix(ow, w, x.dtype)
    y = np.einsum("oh,nchw,pw->ncop", ah, x, aw, optimize=True)
    return np.ascontiguousarray(y)


def bilinear_backward(g, h, w):
    n, c, oh, ow = g.shape
    ah = _lerp_matrix(oh, h, g.dtype)
    aw = _lerp_matrix(ow, w, g.dtype)
    dx = np.einsum("oh,ncop,pw->nchw", ah, g, aw, optimize=True)
    return np.ascontiguousarray(dx)


def rasterize_streaks(h, w, segments):
    """Accumulate anti-aliased capsule segments into a (h, w) float64 layer.

    ``segments`` rows are (x0, y0, x1, y1, width, intensity). Coverage per
    pixel is clamp(0.5 + width/2 - distance_to_segment, 0, 1) * intensity.
    """
    layer = np.zeros((h, w), dtype=np.float64)
    for x0, y0, x1, y1, width, intensity in segments:
        r = width / 2.0 + 0.5
        xmin = max(int(np.floor(min(x0, x1) - r)), 0)
        xmax = min(int(np.ceil(max(x0, x1) + r)) + 1, w)
        ymin = max(int(np.floor(min(y0, y1) - r)), 0)
        ymax = min(int(np.ceil(max(y0, y1) + r)) + 1, h)
        if xmin >= xmax or ymin >= ymax:
            continue
        ys, xs = np.mgrid[ymin:ymax, xmin:xmax]
        dx, dy = x1 - x0, y1 - y0
        seg_len2 = dx * dx + dy * dy
        if seg_len2 > 0:
            t = ((xs - x0) * dx + (ys - y0) * dy) / seg_len2
            t = np.clip(t, 0.0, 1.0)
        else:
            t = 0.0
        px = x0 + t * dx
        py = y0 + t * dy
        dist = np.sqrt((xs - px) ** 2 + (ys - py) ** 2)
        cov = np.clip(0.5 + width / 2.0 - dist, 0.0, 1.0)
        layer[ymin:ymax, xmin:xmax] += intensity * cov
    return layer
