"""Two-stage deraining pipeline and its joint objective.

Stage one (IDN) predicts the rain layer on a bilinearly sub-sampled grid and
subtracts it; the multi-input attention module turns that prediction into a
key for mining complementary background texture from the full-resolution
rainy input; stage two (BRN) super-resolves the fused features back to the
input grid as a residual on top of the upsampled stage-one result.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import ops
from .blocks import HybridBackbone, MultiInputAttention, Stem
from .layers import Conv2d, Module
from .metrics import ssim
from .tensor import EngineError, Tensor


VARIANTS = ("custom", "desk", "ELF", "ELF-LW")


@dataclass
class ModelConfig:
    """Architecture and objective hyperparameters."""

    channels: int = 48
    rtb_depth: int = 10
    heads: int = 4
    sample_factor: int = 2
    rcab_per_stage: int = 1
    edb_stages: int = 6
    dsc_encoder: bool = True
    reduction: int = 4
    ffn_expansion: float = 4.0
    alpha: float = -0.15
    lam: float = 1.0
    epsilon: float = 1e-3
    swap_qk: bool = False
    share_backbone: bool = False
    variant: str = "ELF"

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise EngineError(f"config: channels {self.channels} not divisible by heads {self.heads}")
        if self.channels % self.reduction != 0:
            raise EngineError(f"config: channels {self.channels} not divisible by reduction {self.reduction}")
        if self.sample_factor < 2:
            raise EngineError(f"config: sample_factor must be >= 2, got {self.sample_factor}")
        if self.edb_stages % 2 != 0:
            raise EngineError(f"config: edb_stages must be even, got {self.edb_stages}")
        if self.epsilon <= 0:
            raise EngineError("config: epsilon must be positive")

    @property
    def divisor(self) -> int:
        """Input extents must be divisible by this (two EDB halvings on the sub-grid)."""
        return 4 * self.sample_factor


def variant_config(name: str, **overrides) -> ModelConfig:
    if name == "ELF":
        cfg = ModelConfig(variant="ELF")
    elif name == "ELF-LW":
        cfg = ModelConfig(channels=32, rtb_depth=5, heads=2, variant="ELF-LW")
    elif name == "desk":
        cfg = ModelConfig(channels=8, rtb_depth=2, heads=2, variant="desk")
    else:
        raise EngineError(f"unknown variant {name!r} (expected ELF, ELF-LW or desk)")
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class DerainOutputs:
    """Named intermediate images of one forward pass (graph tensors)."""

    rainy_sub: Tensor
    rain_pred_sub: Tensor
    derained_sub: Tensor
    derained_full: Tensor

    def export_decomposition(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical-domain (rain, derained) split with rain + derained == rainy bitwise."""
        return split_exact(self.rainy_sub.data, self.derained_sub.data)

    def export_images(self) -> dict[str, np.ndarray]:
        """Display-ready arrays clamped to [0, 1]."""
        rain, derained = self.export_decomposition()
        return {
            "derained": np.clip(self.derained_full.data, 0.0, 1.0),
            "rain_pred_sub": np.clip(rain, 0.0, 1.0),
            "derained_sub": np.clip(derained, 0.0, 1.0),
        }


def split_exact(rainy: np.ndarray, derained_raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Decompose rainy into (rain, derained) with rain + derained == rainy bit-exact.

    The derained half is clamped into the physical range [0, rainy] (additive
    rain is non-negative and never brightens past the rainy signal); within
    that range an exactly-rounding pair always exists, reached by nudging
    whichever half sits in the finer float binade by single ulps.
    """
    d = np.clip(derained_raw, 0.0, rainy)
    p = (rainy - d).astype(rainy.dtype)
    inf = np.asarray(np.inf, rainy.dtype)
    for _ in range(8):
        bad = (p + d) != rainy
        if not bad.any():
            return p, d
        toward = np.where((rainy - (p + d)) > 0, inf, -inf)
        nudge_p = np.spacing(np.abs(p)) <= np.spacing(np.abs(d))
        p = np.where(bad & nudge_p, np.nextafter(p, toward), p)
        d = np.where(bad & ~nudge_p, np.nextafter(d, toward), d)
    raise EngineError("split_exact: decomposition failed to converge")  # pragma: no cover


class DerainModel(Module):
    """IDN -> MAM -> BRN assembly with separate (optionally tied) backbones."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c = cfg.channels
        self.idn = HybridBackbone(3, cfg, rng)
        self.idn_proj = Conv2d(c, 3, 3, rng, zero_init=True)
        self.mam = MultiInputAttention(cfg, rng)
        if cfg.share_backbone:
            # tied trunk: BRN keeps its own stem but reuses IDN's RTB/EDB/merge
            # weights; the tied reference bypasses registration so every
            # parameter still appears exactly once.
            self.brn_stem = Stem(c, cfg, rng)
            object.__setattr__(self, "_tied_trunk", self.idn.trunk)
        else:
            self.brn = HybridBackbone(c, cfg, rng)
        self.brn_tail = Conv2d(c, 3, 1, rng, zero_init=True)

    def forward(self, rainy: Tensor, recorder: Optional[list] = None) -> DerainOutputs:
        cfg = self.cfg
        if rainy.ndim != 4 or rainy.shape[1] != 3:
            raise EngineError(f"elf_forward: expected (N, 3, H, W) input, got {rainy.shape}")
        n, _, h, w = rainy.shape
        div = cfg.divisor
        if h % div != 0 or w % div != 0:
            raise EngineError(
                f"elf_forward: spatial extents ({h}, {w}) must be multiples of {div} "
                f"(4 x sample_factor)")
        s = cfg.sample_factor

        rainy_sub = ops.bilinear_resize(rainy, scale=1.0 / s)
        rain_pred = self.idn_proj(self.idn(rainy_sub, recorder))
        derained_sub = ops.sub(rainy_sub, rain_pred)

        fused = self.mam(rain_pred, rainy, derained_sub, recorder)
        if cfg.share_backbone:
            brn_feat = self._tied_trunk(self.brn_stem(fused), recorder)
        else:
            brn_feat = self.brn(fused, recorder)
        residual = self.brn_tail(ops.bilinear_resize(brn_feat, scale=float(s)))
        derained_full = ops.add(residual, ops.bilinear_resize(derained_sub, scale=float(s)))
        return DerainOutputs(rainy_sub, rain_pred, derained_sub, derained_full)


def charbonnier(pred: Tensor, target: Tensor, epsilon: float) -> Tensor:
    """Smooth L1 surrogate: mean of sqrt(diff^2 + eps^2)."""
    diff = ops.sub(pred, target)
    return ops.mean(ops.sqrt(ops.add(ops.mul(diff, diff), epsilon * epsilon)))


def loss_joint(out: DerainOutputs, clean: Tensor, cfg: ModelConfig):
    """Joint objective: per-branch Charbonnier + alpha * SSIM, summed with weight lam.

    Returns (total, parts) where parts holds float values of the two branch
    losses. alpha is negative, so minimizing the total maximizes SSIM; at a
    perfect prediction each branch equals epsilon + alpha.
    """
    if clean.shape != out.derained_full.shape:
        raise EngineError(
            f"loss_joint: clean shape {clean.shape} != prediction {out.derained_full.shape}")
    clean_sub = ops.bilinear_resize(clean, scale=1.0 / cfg.sample_factor)
    l_idn = ops.add(charbonnier(out.derained_sub, clean_sub, cfg.epsilon),
                    ops.scale(ssim(out.derained_sub, clean_sub), cfg.alpha))
    l_brn = ops.add(charbonnier(out.derained_full, clean, cfg.epsilon),
                    ops.scale(ssim(out.derained_full, clean), cfg.alpha))
    total = ops.add(l_idn, ops.scale(l_brn, cfg.lam))
    return total, {"loss_idn": l_idn.item(), "loss_brn": l_brn.item()}


def count_params(cfg: ModelConfig) -> int:
    """Exact scalar parameter count for a config."""
    return DerainModel(cfg, seed=0).param_count()


def param_breakdown(cfg: ModelConfig) -> dict[str, int]:
    """Per-component parameter counts keyed by top-level module name."""
    model = DerainModel(cfg, seed=0)
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        groups[top] = groups.get(top, 0) + p.size
    return groups
