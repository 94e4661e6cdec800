"""Composite blocks of the deraining backbone.

The backbone is a dual-path hybrid: a residual Transformer branch (RTB)
aggregates global structure through channel attention while a three-scale
encoder-decoder branch (EDB) models local texture; a hybrid fusion block
(HFB) merges the two. The multi-input attention module (MAM) reuses the same
channel attention to pull complementary background texture out of the rainy
input, keyed by the predicted rain map.
"""

from __future__ import annotations

from typing import Optional

from . import ops
from .layers import (
    RCAB,
    ChannelAttention,
    Conv2d,
    DSConv,
    Module,
    ModuleList,
    QKVEmbed,
    TransformerBlock,
    _ones,
    attention_core,
)
from .tensor import EngineError, Tensor


class ResidualTransformerBranch(Module):
    """Stack of Transformer blocks with a trailing conv inside an outer residual."""

    def __init__(self, c, depth, heads, expansion, rng):
        super().__init__()
        self.blocks = ModuleList(
            TransformerBlock(c, heads, expansion, rng) for _ in range(depth))
        self.tail = Conv2d(c, c, 3, rng, zero_init=True)

    def forward(self, x: Tensor, recorder: Optional[list] = None) -> Tensor:
        y = x
        for block in self.blocks:
            y = block(y, recorder)
        return ops.add(x, self.tail(y))


class HybridFusionBlock(Module):
    """concat -> separable 3x3 (k*C -> C) -> channel attention."""

    def __init__(self, c, n_inputs, reduction, rng):
        super().__init__()
        if n_inputs < 2:
            raise EngineError("hfb_fuse: needs at least two inputs")
        self.n_inputs = n_inputs
        self.mix = DSConv(c * n_inputs, c, rng)
        self.attn = ChannelAttention(c, reduction, rng)

    def forward(self, inputs) -> Tensor:
        if len(inputs) != self.n_inputs:
            raise EngineError(
                f"hfb_fuse: got {len(inputs)} inputs, block built for {self.n_inputs}")
        shape = inputs[0].shape
        for t in inputs[1:]:
            if t.shape != shape:
                raise EngineError(f"hfb_fuse: input shapes differ ({t.shape} vs {shape})")
        return self.attn(self.mix(ops.concat(inputs, axis=1)))


class Rescale(Module):
    """Bilinear resample to a ratio of the input grid, then a 1x1 conv."""

    def __init__(self, c, factor, rng):
        super().__init__()
        self.factor = factor
        self.conv = Conv2d(c, c, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(ops.bilinear_resize(x, scale=self.factor))


class EncoderStage(Module):
    def __init__(self, c, rcabs, reduction, rng, separable):
        super().__init__()
        self.rcabs = ModuleList(
            RCAB(c, reduction, rng, separable_first=separable) for _ in range(rcabs))
        self.fuse = HybridFusionBlock(c, 2, reduction, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = x
        for r in self.rcabs:
            y = r(y)
        return self.fuse([x, y])


class DecoderStage(Module):
    def __init__(self, c, rcabs, reduction, rng):
        super().__init__()
        self.skip_fuse = HybridFusionBlock(c, 2, reduction, rng)
        self.rcabs = ModuleList(RCAB(c, reduction, rng) for _ in range(rcabs))
        self.fuse = HybridFusionBlock(c, 2, reduction, rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        x = self.skip_fuse([x, skip])
        y = x
        for r in self.rcabs:
            y = r(y)
        return self.fuse([x, y])


class EncoderDecoderBranch(Module):
    """Asymmetric U-shape at scales 1, 1/2, 1/4.

    Encoder stage i feeds decoder stage (stages-1-i) through an HFB skip;
    rescaling between scales is bilinear + 1x1 conv. Encoder RCABs are
    parameter-lean (separable first conv) when ``dsc_encoder`` is set,
    decoder RCABs always use standard convolutions.
    """

    def __init__(self, c, stages, rcab_per_stage, reduction, rng, dsc_encoder):
        super().__init__()
        if stages % 2 != 0:
            raise EngineError(f"edb: stage count {stages} must be even")
        self.half = stages // 2
        self.encoder = ModuleList(
            EncoderStage(c, rcab_per_stage, reduction, rng, dsc_encoder)
            for _ in range(self.half))
        self.down = ModuleList(Rescale(c, 0.5, rng) for _ in range(self.half - 1))
        self.decoder = ModuleList(
            DecoderStage(c, rcab_per_stage, reduction, rng) for _ in range(self.half))
        self.up = ModuleList(Rescale(c, 2.0, rng) for _ in range(self.half - 1))

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2], x.shape[3]
        div = 2 ** (self.half - 1)
        if h % div != 0 or w % div != 0:
            raise EngineError(
                f"edb_forward: spatial extents ({h}, {w}) must be divisible by {div}; "
                f"pad the input accordingly")
        skips = []
        y = x
        for i, stage in enumerate(self.encoder):
            if i > 0:
                y = self.down[i - 1](y)
            y = stage(y)
            skips.append(y)
        for i, stage in enumerate(self.decoder):
            if i > 0:
                y = self.up[i - 1](y)
            y = stage(y, skips[self.half - 1 - i])
        return y


class Stem(Module):
    """Shallow shared embedding: 3x3 conv into C channels plus one RCAB."""

    def __init__(self, cin, cfg, rng):
        super().__init__()
        self.conv = Conv2d(cin, cfg.channels, 3, rng)
        self.rcab = RCAB(cfg.channels, cfg.reduction, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.rcab(self.conv(x))


class BackboneTrunk(Module):
    """Parallel RTB/EDB over stem features, merged by one HFB."""

    def __init__(self, cfg, rng):
        super().__init__()
        c = cfg.channels
        self.rtb = ResidualTransformerBranch(c, cfg.rtb_depth, cfg.heads,
                                             cfg.ffn_expansion, rng)
        self.edb = EncoderDecoderBranch(c, cfg.edb_stages, cfg.rcab_per_stage,
                                        cfg.reduction, rng, cfg.dsc_encoder)
        self.merge = HybridFusionBlock(c, 2, cfg.reduction, rng)

    def forward(self, f: Tensor, recorder: Optional[list] = None) -> Tensor:
        return self.merge([self.rtb(f, recorder), self.edb(f)])


class HybridBackbone(Module):
    """Stem feeding the dual-path trunk."""

    def __init__(self, cin, cfg, rng):
        super().__init__()
        self.stem = Stem(cin, cfg, rng)
        self.trunk = BackboneTrunk(cfg, rng)

    def forward(self, x: Tensor, recorder: Optional[list] = None) -> Tensor:
        return self.trunk(self.stem(x), recorder)


class StridedEmbed(Module):
    """s-stride s x s patch embedding plus depthwise 3x3 local mixing.

    Brings a full-resolution image onto the (H/s, W/s) working grid; this is
    the single place the two resolutions meet.
    """

    def __init__(self, cin, cout, s, rng):
        super().__init__()
        self.proj = Conv2d(cin, cout, s, rng, stride=s, padding=0)
        self.local = Conv2d(cout, cout, 3, rng, groups=cout)

    def forward(self, x: Tensor) -> Tensor:
        return self.local(self.proj(x))


class MultiInputAttention(Module):
    """Background-texture extraction keyed by the predicted rain map.

    The rain prediction embeds to K on the sub-grid; the rainy input embeds
    to Q and V through stride-s patch embeddings; channel attention between
    them yields complementary texture f_BT, which an HFB merges with the
    embedding of the sub-grid derained image. ``swap_qk`` exchanges the roles
    of the two sources.
    """

    def __init__(self, cfg, rng):
        super().__init__()
        c, s = cfg.channels, cfg.sample_factor
        self.heads = cfg.heads
        self.swap_qk = cfg.swap_qk
        self.k_embed = QKVEmbed(3, c, rng)
        self.q_embed = StridedEmbed(3, c, s, rng)
        self.v_embed = StridedEmbed(3, c, s, rng)
        self.temperature = _ones((cfg.heads, 1, 1))
        self.out_proj = Conv2d(c, c, 1, rng)
        self.b_embed = Conv2d(3, c, 3, rng)
        self.fuse = HybridFusionBlock(c, 2, cfg.reduction, rng)
        self.sample_factor = s

    def forward(self, rain_pred: Tensor, rainy_full: Tensor, derained_sub: Tensor,
                recorder: Optional[list] = None) -> Tensor:
        s = self.sample_factor
        if (rainy_full.shape[2] != rain_pred.shape[2] * s
                or rainy_full.shape[3] != rain_pred.shape[3] * s):
            raise EngineError(
                f"mam_forward: full-resolution extents {rainy_full.shape[2:]} are not "
                f"{s}x the sub-grid extents {rain_pred.shape[2:]}")
        k = self.k_embed(rain_pred)
        q = self.q_embed(rainy_full)
        v = self.v_embed(rainy_full)
        if self.swap_qk:
            q, k = k, q
        texture = self.out_proj(
            attention_core(q, k, v, self.heads, self.temperature, recorder))
        background = self.b_embed(derained_sub)
        return self.fuse([texture, background])
