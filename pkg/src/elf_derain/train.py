"""Seeded, single-context training loop with loss-curve and checkpoint output."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .checkpoint import load_checkpoint, load_model_params, model_state, save_checkpoint
from .config import TrainConfig
from .data import SamplePair, crop_patches, hwc_to_nchw
from .metrics import MetricReport, MetricRow, psnr, ssim
from .model import DerainModel, loss_joint
from .optim import Adam, OptimConfig
from .tensor import EngineError, Tensor, record


class DivergenceError(EngineError):
    """Raised when the loss goes NaN or stays blown up for 50 straight steps."""


@dataclass
class CurveRow:
    step: int
    epoch: int
    lr: float
    loss_idn: float
    loss_brn: float
    loss_total: float


def curve_csv(curve: list["CurveRow"]) -> str:
    lines = ["step,epoch,lr,loss_idn,loss_brn,loss_total"]
    for r in curve:
        lines.append(f"{r.step},{r.epoch},{r.lr!r},{r.loss_idn!r},{r.loss_brn!r},{r.loss_total!r}")
    return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    curve: list[CurveRow]
    checkpoint_path: Optional[Path]
    steps_run: int


def _prepare(pairs: list[SamplePair], tc: TrainConfig) -> list[SamplePair]:
    if tc.patch <= 0:
        return pairs
    out = []
    for i, pair in enumerate(pairs):
        out.extend(crop_patches(pair, tc.patch, tc.patches_per_image,
                                seed=tc.seed + 7919 * i))
    return out


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train(model: DerainModel, pairs: list[SamplePair], tc: TrainConfig,
          oc: OptimConfig | None = None, out_dir=None,
          step_callback: Optional[Callable[[int, DerainModel], bool]] = None) -> TrainResult:
    """Run the loop: shuffle -> batch -> forward -> joint loss -> backward -> Adam.

    Deterministic for a fixed seed: batch composition, initialization, and the
    parameter trajectory are all functions of (config, seed). ``step_callback``
    may return True to stop early (used by the overfit smoke test).
    """
    if not pairs:
        raise EngineError("train: dataset is empty")
    cfg = model.cfg
    pairs = _prepare(pairs, tc)
    rainy = [hwc_to_nchw(p.rainy) for p in pairs]
    clean = [hwc_to_nchw(p.clean) for p in pairs]

    params = dict(model.named_parameters())
    adam = Adam(params, oc)
    start_step = 0
    if tc.resume:
        state = load_checkpoint(tc.resume)
        load_model_params(model, state)
        adam.load_state(state)
        start_step = adam.step_count

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(tc.seed)
    curve: list[CurveRow] = []
    initial_loss: Optional[float] = None
    blowup_streak = 0
    step = start_step
    stop = False

    for epoch in range(tc.epochs):
        for batch in _batches(len(pairs), tc.batch_size, rng):
            x = Tensor(np.concatenate([rainy[i] for i in batch], axis=0))
            y = Tensor(np.concatenate([clean[i] for i in batch], axis=0))
            with record():
                out = model(x)
                total, parts = loss_joint(out, y, cfg)
                adam.zero_grad()
                total.backward()
            lr = adam.step(epoch)
            step += 1
            loss_val = total.item()
            curve.append(CurveRow(step, epoch, lr, parts["loss_idn"],
                                  parts["loss_brn"], loss_val))

            if np.isnan(loss_val):
                raise DivergenceError(f"train: loss is NaN at step {step}")
            if initial_loss is None:
                initial_loss = loss_val
            if loss_val > 10.0 * abs(initial_loss):
                blowup_streak += 1
                if blowup_streak >= 50:
                    raise DivergenceError(
                        f"train: loss exceeded 10x its initial value for 50 "
                        f"consecutive steps (step {step})")
            else:
                blowup_streak = 0

            if out_path is not None and tc.save_every and step % tc.save_every == 0:
                _save(model, adam, out_path / f"ckpt_step{step:06d}.elf")
            if step_callback is not None and step_callback(step, model):
                stop = True
            if tc.max_steps and step - start_step >= tc.max_steps:
                stop = True
            if stop:
                break
        if stop:
            break

    ckpt_path = None
    if out_path is not None:
        ckpt_path = out_path / "ckpt_final.elf"
        _save(model, adam, ckpt_path)
        (out_path / "curve.csv").write_text(curve_csv(curve), encoding="utf-8",
                                            newline="\n")
    return TrainResult(curve, ckpt_path, step - start_step)


def _save(model: DerainModel, adam: Adam, path: Path) -> None:
    state = model_state(model)
    state.update(adam.state_tensors())
    save_checkpoint(path, state)


def evaluate(model: DerainModel, pairs: list[SamplePair]) -> MetricReport:
    """Inference + PSNR/SSIM over a dataset; timings are per-image wall clock."""
    rows = []
    model(Tensor(hwc_to_nchw(pairs[0].rainy)))  # warm the JIT before timing
    for pair in pairs:
        x = Tensor(hwc_to_nchw(pair.rainy))
        t0 = time.perf_counter()
        out = model(x)
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        derained = np.clip(out.derained_full.data, 0.0, 1.0)
        target = hwc_to_nchw(pair.clean)
        rows.append(MetricRow(pair.sample_id,
                              psnr(derained, target),
                              float(ssim(derained, target).item()),
                              elapsed_ms))
    return MetricReport(rows)
