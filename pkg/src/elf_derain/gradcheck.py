"""Finite-difference verification of analytic gradients.

Every registered scope builds a small float64 problem with randomized
parameters (zero-initialized projections would blind entire paths), computes
analytic gradients through the tape, and compares them against central
differences at seeded sample positions within each parameter tensor. The
reported figure per tensor is a norm-relative error over the sampled entries:
||a - f|| / (||a|| + ||f|| + tiny).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .layers import (
    RCAB,
    ChannelAttention,
    Conv2d,
    DSConv,
    FeedForward,
    LayerNormChannels,
    TransformerBlock,
    TransposedAttention,
)
from .blocks import (
    EncoderDecoderBranch,
    HybridFusionBlock,
    MultiInputAttention,
    ResidualTransformerBranch,
)
from .metrics import ssim
from .model import DerainModel, loss_joint, variant_config
from .tensor import EngineError, Tensor, precision, record


@dataclass
class GradCheckRow:
    scope: str
    param: str
    rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.rel_err < self.tolerance


@dataclass
class GradCheckReport:
    rows: list[GradCheckRow]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def max_rel_err(self) -> float:
        return max((r.rel_err for r in self.rows), default=0.0)

    def lines(self):
        for r in self.rows:
            status = "PASS" if r.passed else "FAIL"
            yield f"{status}  {r.scope}:{r.param}  rel_err={r.rel_err:.3e}  tol={r.tolerance:.0e}"


def _randomize(params: dict[str, Tensor], rng: np.random.Generator) -> None:
    """Re-draw every parameter, including zero-initialized projections.

    Bounds follow fan-in scaling so deep stacks keep sane activation
    magnitudes at the randomized point.
    """
    for p in params.values():
        if p.ndim >= 2:
            fan_in = int(np.prod(p.shape[1:]))
            bound = 1.0 / np.sqrt(max(fan_in, 1))
        else:
            bound = 0.3
        p.data = rng.uniform(-bound, bound, size=p.shape).astype(p.dtype)


def run_check(forward: Callable[[], Tensor], params: dict[str, Tensor],
              scope: str, tolerance: float, seed: int = 0,
              samples_per_tensor: int = 4, h: float = 1e-4) -> list[GradCheckRow]:
    """Compare tape gradients of a scalar-valued ``forward`` with central FD.

    The per-tensor figure is ||a - f|| / (||a|| + ||f|| + floor): a relative
    error with an absolute floor at the FD noise level. Central differences
    resolve nothing below ~eps * |loss| / (2h), so gradients near that
    magnitude are compared against the floor rather than failed on roundoff.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.zero_grad()
    with record():
        loss = forward()
        if loss.size != 1:
            raise EngineError("run_check: forward must produce a scalar")
        loss.backward()
    noise_floor = max(1.0, abs(loss.item())) * 2e-9 / tolerance

    rows = []
    for name, p in params.items():
        if p.grad is None:
            analytic_full = np.zeros(p.size)
        else:
            analytic_full = p.grad.reshape(-1)
        size = p.size
        if size <= samples_per_tensor:
            idx = np.arange(size)
        else:
            idx = rng.choice(size, size=samples_per_tensor, replace=False)
        flat = p.data.reshape(-1)
        fd = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = forward().item()
            flat[i] = orig - h
            down = forward().item()
            flat[i] = orig
            fd[j] = (up - down) / (2.0 * h)
        analytic = analytic_full[idx]
        denom = np.linalg.norm(analytic) + np.linalg.norm(fd) + noise_floor
        rel = float(np.linalg.norm(analytic - fd) / denom)
        rows.append(GradCheckRow(scope, name, rel, tolerance))
    return rows


def _proj_loss(out: Tensor, rng: np.random.Generator) -> Tensor:
    proj = Tensor(rng.standard_normal(out.shape))
    return ops.sum_(ops.mul(out, proj))


LAYER_TOL = 1e-4
COMPOSED_TOL = 1e-3

_x_small = lambda rng, c=4, hw=5: Tensor(rng.uniform(0, 1, (1, c, hw, hw)))


def _scope_builders():
    """scope -> (builder returning (forward, params), tolerance)."""

    def conv2d(rng):
        layer = Conv2d(4, 6, 3, rng)
        x = _x_small(rng)
        return (lambda: _proj_loss(layer(x), np.random.default_rng(11)),
                dict(layer.named_parameters()))

    def conv2d_strided(rng):
        layer = Conv2d(4, 6, 2, rng, stride=2, padding=0)
        x = Tensor(rng.uniform(0, 1, (2, 4, 6, 6)))
        return (lambda: _proj_loss(layer(x), np.random.default_rng(12)),
                dict(layer.named_parameters()))

    def dsconv(rng):
        layer = DSConv(4, 6, rng)
        x = _x_small(rng)
        return (lambda: _proj_loss(layer(x), np.random.default_rng(13)),
                dict(layer.named_parameters()))

    def channel_attention(rng):
        layer = ChannelAttention(4, 2, rng)
        x = _x_small(rng)
        return (lambda: _proj_loss(layer(x), np.random.default_rng(14)),
                dict(layer.named_parameters()))

    def rcab(rng):
        layer = RCAB(4, 2, rng)
        x = _x_small(rng)
        return (lambda: _proj_loss(layer(x), np.random.default_rng(15)),
                dict(layer.named_parameters()))

    def layer_norm(rng):
        layer = LayerNormChannels(4)
        x = _x_small(rng)
        return (lambda: _proj_loss(layer(x), np.random.default_rng(16)),
                dict(layer.named_parameters()))

    def transposed_sa(rng):
        layer = TransposedAttention(4, 2, rng, zero_init_out=False)
        x = _x_small(rng)
        return (lambda: _proj_loss(layer(x, x, x), np.random.default_rng(17)),
                dict(layer.named_parameters()))

    def ffn(rng):
        layer = FeedForward(4, 2.0, rng)
        x = _x_small(rng)
        return (lambda: _proj_loss(layer(x), np.random.default_rng(18)),
                dict(layer.named_parameters()))

    def transformer_block(rng):
        layer = TransformerBlock(4, 2, 2.0, rng)
        x = _x_small(rng)
        return (lambda: _proj_loss(layer(x), np.random.default_rng(19)),
                dict(layer.named_parameters()))

    def bilinear(rng):
        x = Tensor(rng.uniform(0, 1, (1, 3, 6, 6)), requires_grad=True)
        def fwd():
            y = ops.bilinear_resize(x, scale=0.5)
            return _proj_loss(ops.bilinear_resize(y, scale=2.0), np.random.default_rng(20))
        return fwd, {"input": x}

    def softmax_matmul(rng):
        a = Tensor(rng.uniform(-1, 1, (3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-1, 1, (4, 2)), requires_grad=True)
        def fwd():
            return _proj_loss(ops.softmax(ops.matmul(a, b), axis=-1),
                              np.random.default_rng(21))
        return fwd, {"a": a, "b": b}

    def ssim_input(rng):
        x = Tensor(rng.uniform(0.1, 0.9, (1, 3, 12, 12)), requires_grad=True)
        y = Tensor(rng.uniform(0.1, 0.9, (1, 3, 12, 12)))
        return (lambda: ssim(x, y)), {"input": x}

    def hfb(rng):
        layer = HybridFusionBlock(4, 3, 2, rng)
        xs = [_x_small(rng) for _ in range(3)]
        return (lambda: _proj_loss(layer(xs), np.random.default_rng(22)),
                dict(layer.named_parameters()))

    def rtb(rng):
        layer = ResidualTransformerBranch(4, 2, 2, 2.0, rng)
        x = _x_small(rng)
        return (lambda: _proj_loss(layer(x), np.random.default_rng(23)),
                dict(layer.named_parameters()))

    def edb(rng):
        layer = EncoderDecoderBranch(4, 6, 1, 2, rng, dsc_encoder=True)
        x = Tensor(rng.uniform(0, 1, (1, 4, 8, 8)))
        return (lambda: _proj_loss(layer(x), np.random.default_rng(24)),
                dict(layer.named_parameters()))

    def mam(rng):
        cfg = variant_config("desk")
        layer = MultiInputAttention(cfg, rng)
        rain = Tensor(rng.uniform(0, 0.5, (1, 3, 8, 8)))
        rainy = Tensor(rng.uniform(0, 1, (1, 3, 16, 16)))
        derained = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)))
        return (lambda: _proj_loss(layer(rain, rainy, derained),
                                   np.random.default_rng(25)),
                dict(layer.named_parameters()))

    def model(rng):
        # 24x24 input: the smallest multiple of 4*s whose sub-grid still
        # fits the 11x11 SSIM window of the stage-one loss term
        cfg = variant_config("desk")
        net = DerainModel(cfg, seed=0)
        x = Tensor(rng.uniform(0, 1, (1, 3, 24, 24)))
        y = Tensor(rng.uniform(0, 1, (1, 3, 24, 24)))
        def fwd():
            total, _ = loss_joint(net(x), y, cfg)
            return total
        return fwd, dict(net.named_parameters())

    simple = {
        "conv2d": conv2d, "conv2d_strided": conv2d_strided, "dsconv": dsconv,
        "channel_attention": channel_attention, "rcab": rcab,
        "layer_norm": layer_norm, "ffn": ffn, "bilinear": bilinear,
        "softmax_matmul": softmax_matmul, "hfb": hfb, "ssim": ssim_input,
    }
    composed = {
        "transposed_sa": transposed_sa, "transformer_block": transformer_block,
        "rtb": rtb, "edb": edb, "mam": mam, "model": model,
    }
    scopes = {name: (fn, LAYER_TOL) for name, fn in simple.items()}
    scopes.update({name: (fn, COMPOSED_TOL) for name, fn in composed.items()})
    return scopes


def gradcheck(scope: str = "all", seed: int = 0, samples_per_tensor: int = 4,
              base_points: int = 3) -> GradCheckReport:
    """Run finite-difference checks for one scope or all of them (float64).

    ReLU kinks make an h-wide central-difference probe cross a
    non-differentiable point with small but non-zero probability, so a tensor
    that fails is re-checked at up to ``base_points`` alternative seeded
    parameter draws and keeps its best error. Kink hits move between base
    points; a systematically wrong backward fails at every one.
    """
    scopes = _scope_builders()
    if scope != "all" and scope not in scopes:
        raise EngineError(
            f"gradcheck: unknown scope {scope!r}; choose from all, {', '.join(sorted(scopes))}")
    names = sorted(scopes) if scope == "all" else [scope]
    rows: list[GradCheckRow] = []
    with precision("float64"):
        for name in names:
            builder, tol = scopes[name]
            spt = 2 if name == "model" else samples_per_tensor
            best: dict[str, float] = {}
            for attempt in range(base_points):
                shift = 101 * attempt
                forward, params = builder(np.random.default_rng(seed + 1 + shift))
                _randomize(params, np.random.default_rng(seed + 2 + shift))
                attempt_rows = run_check(forward, params, name, tol,
                                         seed=seed + shift,
                                         samples_per_tensor=spt)
                for r in attempt_rows:
                    if r.param not in best or r.rel_err < best[r.param]:
                        best[r.param] = r.rel_err
                if all(err < tol for err in best.values()):
                    break
            rows.extend(GradCheckRow(name, param, err, tol)
                        for param, err in best.items())
    return GradCheckReport(rows)
