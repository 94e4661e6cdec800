"""Image quality metrics.

``psnr`` is a plain float metric; ``ssim`` is built from engine primitives so
the same implementation serves both as the reported metric and as the
differentiable loss term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import EngineError, Tensor

PSNR_CAP_DB = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def psnr(a, b) -> float:
    """10 * log10(1 / MSE) for images in [0, 1]; identical images report the cap."""
    a = a.data if isinstance(a, Tensor) else np.asarray(a)
    b = b.data if isinstance(b, Tensor) else np.asarray(b)
    if a.shape != b.shape:
        raise EngineError(f"psnr: shapes differ {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_kernel(channels: int, dtype) -> np.ndarray:
    half = SSIM_WINDOW // 2
    coords = np.arange(SSIM_WINDOW, dtype=np.float64) - half
    g = np.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    win = np.outer(g, g)
    win /= win.sum()
    return np.broadcast_to(win.astype(dtype), (channels, 1, SSIM_WINDOW, SSIM_WINDOW)).copy()


def ssim(a, b) -> Tensor:
    """Mean SSIM index with an 11x11 Gaussian window (sigma 1.5).

    Differentiable end to end: feed graph tensors to use it as a loss term,
    or plain arrays / detached tensors for metric reporting.
    """
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    b = b if isinstance(b, Tensor) else Tensor(np.asarray(b))
    if a.shape != b.shape:
        raise EngineError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    if a.ndim != 4:
        raise EngineError("ssim: expects NCHW input")
    n, c, h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise EngineError(
            f"ssim: image ({h}, {w}) smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = Tensor(_gaussian_kernel(c, a.dtype), dtype=a.dtype)

    def blur(t):
        return ops.conv2d(t, win, stride=1, padding=0, groups=c)

    mu_a = blur(a)
    mu_b = blur(b)
    mu_aa = ops.mul(mu_a, mu_a)
    mu_bb = ops.mul(mu_b, mu_b)
    mu_ab = ops.mul(mu_a, mu_b)
    var_a = ops.sub(blur(ops.mul(a, a)), mu_aa)
    var_b = ops.sub(blur(ops.mul(b, b)), mu_bb)
    cov = ops.sub(blur(ops.mul(a, b)), mu_ab)

    num = ops.mul(ops.add(ops.scale(mu_ab, 2.0), SSIM_C1),
                  ops.add(ops.scale(cov, 2.0), SSIM_C2))
    den = ops.mul(ops.add(ops.add(mu_aa, mu_bb), SSIM_C1),
                  ops.add(ops.add(var_a, var_b), SSIM_C2))
    return ops.mean(ops.div(num, den))


@dataclass
class MetricRow:
    sample_id: str
    psnr_db: float
    ssim: float
    ms_per_image: float


@dataclass
class MetricReport:
    rows: list[MetricRow]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr_db for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    def to_csv(self) -> str:
        lines = ["id,psnr_db,ssim,ms_per_image"]
        for r in self.rows:
            lines.append(f"{r.sample_id},{r.psnr_db:.6f},{r.ssim:.6f},{r.ms_per_image:.3f}")
        return "\n".join(lines) + "\n"
