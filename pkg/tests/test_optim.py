"""Adam updates and the step-decay schedule."""

import numpy as np
import pytest

from elf_derain.optim import Adam, OptimConfig, lr_schedule
from elf_derain.tensor import EngineError, Tensor


def scalar_param(value=1.0):
    return {"w": Tensor(np.asarray([value]), requires_grad=True)}


class TestSchedule:
    def test_epoch_130(self):
        cfg = OptimConfig()
        assert lr_schedule(cfg, 130) == pytest.approx(2e-4 * 0.64, abs=0)

    def test_closed_form_exact_through_600(self):
        cfg = OptimConfig()
        for epoch in range(601):
            assert lr_schedule(cfg, epoch) == 2e-4 * 0.8 ** (epoch // 65)


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        params = scalar_param(2.5)
        adam = Adam(params)
        params["w"].grad = np.zeros(1)
        adam.step(epoch=0)
        assert params["w"].data[0] == 2.5

    def test_first_step_magnitude(self):
        params = scalar_param(0.0)
        cfg = OptimConfig()
        adam = Adam(params, cfg)
        params["w"].grad = np.ones(1)
        adam.step(epoch=0)
        expected = cfg.base_lr * 1.0 / (1.0 + cfg.eps)
        assert abs(-params["w"].data[0] - expected) < 1e-12

    def test_zero_lr_leaves_params(self):
        params = scalar_param(1.5)
        adam = Adam(params, OptimConfig(base_lr=0.0))
        params["w"].grad = np.full(1, 3.0)
        adam.step(epoch=0)
        assert params["w"].data[0] == 1.5
        assert adam.step_count == 1

    def test_nan_gradient_aborts_with_name(self):
        params = scalar_param()
        adam = Adam(params)
        params["w"].grad = np.asarray([np.nan])
        with pytest.raises(EngineError, match="'w'"):
            adam.step(epoch=0)

    def test_step_counter_strictly_increasing(self):
        params = scalar_param()
        adam = Adam(params)
        seen = []
        for _ in range(3):
            params["w"].grad = np.ones(1)
            adam.step(epoch=0)
            seen.append(adam.step_count)
        assert seen == [1, 2, 3]

    def test_state_roundtrip(self):
        params = scalar_param()
        adam = Adam(params)
        for _ in range(4):
            params["w"].grad = np.full(1, 0.3)
            adam.step(epoch=0)
        state = adam.state_tensors()

        params2 = scalar_param()
        adam2 = Adam(params2)
        adam2.load_state({k: np.asarray(v) for k, v in state.items()})
        assert adam2.step_count == 4
        assert np.allclose(adam2.m["w"], adam.m["w"])
        assert np.allclose(adam2.v["w"], adam.v["w"])
