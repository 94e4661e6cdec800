"""Adam optimizer with the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import EngineError, Tensor


@dataclass
class OptimConfig:
    base_lr: float = 2e-4
    decay: float = 0.8
    decay_every: int = 65
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def lr_schedule(cfg: OptimConfig, epoch: int) -> float:
    """base_lr * decay ** floor(epoch / decay_every)."""
    return cfg.base_lr * cfg.decay ** (epoch // cfg.decay_every)


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], cfg: OptimConfig | None = None):
        self.cfg = cfg or OptimConfig()
        self.params = params
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, epoch: int) -> float:
        """Apply one update from the accumulated gradients; returns the lr used."""
        cfg = self.cfg
        lr = lr_schedule(cfg, epoch)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise EngineError(f"adam_step: non-finite gradient for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype)
        return lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Moment buffers and counters as named arrays for checkpointing."""
        state: dict[str, np.ndarray] = {}
        for name in self.params:
            state[f"optim.m.{name}"] = self.m[name]
            state[f"optim.v.{name}"] = self.v[name]
        state["optim.step"] = np.asarray(float(self.step_count), dtype=np.float64)
        return state

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.params:
            mk, vk = f"optim.m.{name}", f"optim.v.{name}"
            if mk in arrays:
                self.m[name] = arrays[mk].astype(self.m[name].dtype).reshape(self.m[name].shape)
            if vk in arrays:
                self.v[name] = arrays[vk].astype(self.v[name].dtype).reshape(self.v[name].shape)
        if "optim.step" in arrays:
            self.step_count = int(arrays["optim.step"])
