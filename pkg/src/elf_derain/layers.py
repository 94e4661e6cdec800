"""Parameterized building blocks.

Modules register parameters and submodules in attribute-assignment order, so
hierarchical names like ``edb.stage0.rcab0.conv1.weight`` are stable across
runs. Convolution weights use fan-in-scaled uniform init; residual-path final
projections are zero-initialized so every residual block starts as the
identity map.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import EngineError, Tensor, default_dtype


class Module:
    """Minimal container tracking parameters and submodules by name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> Iterator[Tensor]:
        for _, p in self.named_parameters():
            yield p

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = list(modules)
        for i, m in enumerate(self._items):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    data = rng.uniform(-bound, bound, size=shape).astype(default_dtype())
    return Tensor(data, requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=default_dtype()), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=default_dtype()), requires_grad=True)


class Conv2d(Module):
    """Standard convolution; ``zero_init`` makes it an all-zero projection."""

    def __init__(self, cin, cout, k, rng, stride=1, padding=None, groups=1,
                 bias=True, zero_init=False):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups
        fan_in = (cin // groups) * k * k
        shape = (cout, cin // groups, k, k)
        self.weight = _zeros(shape) if zero_init else _uniform(rng, shape, fan_in)
        if bias:
            self.bias = _zeros((cout,))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          padding=self.padding, groups=self.groups)


class DSConv(Module):
    """Depthwise k x k followed by pointwise 1x1 (a separable convolution)."""

    def __init__(self, cin, cout, rng, k=3, zero_init=False):
        super().__init__()
        self.depthwise = Conv2d(cin, cin, k, rng, groups=cin)
        self.pointwise = Conv2d(cin, cout, 1, rng, zero_init=zero_init)

    def forward(self, x: Tensor) -> Tensor:
        return self.pointwise(self.depthwise(x))


class ChannelAttention(Module):
    """Squeeze-excite gate: GAP -> 1x1 (C -> C/r) -> ReLU -> 1x1 -> sigmoid."""

    def __init__(self, c, reduction, rng):
        super().__init__()
        if c % reduction != 0:
            raise EngineError(f"channel_attention: C={c} not divisible by r={reduction}")
        self.squeeze = Conv2d(c, c // reduction, 1, rng)
        self.excite = Conv2d(c // reduction, c, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        g = ops.global_avg_pool(x)
        g = ops.sigmoid(self.excite(ops.relu(self.squeeze(g))))
        return ops.mul(x, g)


class RCAB(Module):
    """Residual channel attention block: x + CA(conv -> ReLU -> conv).

    ``separable_first`` swaps the first convolution for a DSConv (the
    parameter-lean encoder flavor); the trailing conv is zero-initialized so
    the block starts as the identity.
    """

    def __init__(self, c, reduction, rng, separable_first=False):
        super().__init__()
        if separable_first:
            self.conv1 = DSConv(c, c, rng)
        else:
            self.conv1 = Conv2d(c, c, 3, rng)
        self.conv2 = Conv2d(c, c, 3, rng, zero_init=True)
        self.attn = ChannelAttention(c, reduction, rng)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv2(ops.relu(self.conv1(x)))
        return ops.add(x, self.attn(y))


class LayerNormChannels(Module):
    """Per-pixel normalization over the channel axis with learned affine."""

    EPS = 1e-6

    def __init__(self, c):
        super().__init__()
        self.gamma = _ones((1, c, 1, 1))
        self.beta = _zeros((1, c, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        mu = ops.mean(x, axis=1, keepdims=True)
        centered = ops.sub(x, mu)
        var = ops.mean(ops.mul(centered, centered), axis=1, keepdims=True)
        std = ops.sqrt(ops.add(var, self.EPS))
        normed = ops.div(centered, std)
        return ops.add(ops.mul(normed, self.gamma), self.beta)


def attention_core(q: Tensor, k: Tensor, v: Tensor, heads: int,
                   temperature: Tensor, recorder: Optional[list] = None) -> Tensor:
    """Channel cross-covariance attention shared by RTB blocks and MAM.

    Q, K, V are (N, C, H, W); per head they flatten to (C/h, H*W) and the
    softmaxed covariance M = softmax(tau * K Q^T) has shape (C/h, C/h) - its
    memory never depends on the pixel count, only on the channel width.
    """
    n, c, h, w = q.shape
    if c % heads != 0:
        raise EngineError(f"attention: C={c} not divisible by heads={heads}")
    ch = c // heads

    def split(t):
        return ops.reshape(t, (n, heads, ch, h * w))

    qh, kh_, vh = split(q), split(k), split(v)
    cov = ops.matmul(kh_, ops.transpose_last2(qh))
    cov = ops.mul(cov, temperature)
    m = ops.softmax(cov, axis=-1)
    if recorder is not None:
        recorder.append(m.data.copy())
    out = ops.matmul(m, vh)
    return ops.reshape(out, (n, c, h, w))


class QKVEmbed(Module):
    """1x1 projection followed by a depthwise 3x3 to pick up local context."""

    def __init__(self, cin, cout, rng):
        super().__init__()
        self.proj = Conv2d(cin, cout, 1, rng)
        self.local = Conv2d(cout, cout, 3, rng, groups=cout)

    def forward(self, x: Tensor) -> Tensor:
        return self.local(self.proj(x))


class TransposedAttention(Module):
    """Multi-head channel-covariance attention with a learned per-head scale."""

    def __init__(self, c, heads, rng, zero_init_out=True):
        super().__init__()
        if c % heads != 0:
            raise EngineError(f"transposed_sa: C={c} not divisible by heads={heads}")
        self.heads = heads
        self.q_embed = QKVEmbed(c, c, rng)
        self.k_embed = QKVEmbed(c, c, rng)
        self.v_embed = QKVEmbed(c, c, rng)
        self.temperature = _ones((heads, 1, 1))
        self.out_proj = Conv2d(c, c, 1, rng, zero_init=zero_init_out)

    def forward(self, q_src: Tensor, k_src: Tensor, v_src: Tensor,
                recorder: Optional[list] = None) -> Tensor:
        if q_src.shape != k_src.shape or q_src.shape != v_src.shape:
            raise EngineError(
                f"transposed_sa: input shapes differ {q_src.shape} {k_src.shape} {v_src.shape}")
        out = attention_core(self.q_embed(q_src), self.k_embed(k_src),
                             self.v_embed(v_src), self.heads, self.temperature,
                             recorder)
        return self.out_proj(out)


class FeedForward(Module):
    """1x1 expand -> depthwise 3x3 -> GELU -> 1x1 project (zero-initialized)."""

    def __init__(self, c, expansion, rng):
        super().__init__()
        hidden = int(c * expansion)
        self.expand = Conv2d(c, hidden, 1, rng)
        self.local = Conv2d(hidden, hidden, 3, rng, groups=hidden)
        self.project = Conv2d(hidden, c, 1, rng, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        return self.project(ops.gelu(self.local(self.expand(x))))


class TransformerBlock(Module):
    """Pre-norm block: x + SA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, c, heads, expansion, rng):
        super().__init__()
        self.norm1 = LayerNormChannels(c)
        self.attn = TransposedAttention(c, heads, rng)
        self.norm2 = LayerNormChannels(c)
        self.ffn = FeedForward(c, expansion, rng)

    def forward(self, x: Tensor, recorder: Optional[list] = None) -> Tensor:
        y = self.norm1(x)
        x = ops.add(x, self.attn(y, y, y, recorder))
        return ops.add(x, self.ffn(self.norm2(x)))


def dsconv_param_count(cin: int, cout: int, k: int = 3) -> int:
    """Closed-form parameter count of DSConv (with both biases)."""
    return cin * k * k + cin + cin * cout + cout


def conv_param_count(cin: int, cout: int, k: int = 3) -> int:
    return cin * cout * k * k + cout
