"""Autograd engine: forward semantics, tape behavior, gradient oracles."""

import numpy as np
import pytest

from elf_derain import ops
from elf_derain.tensor import (
    EngineError,
    Tensor,
    precision,
    record,
    set_finite_checks,
)


def fd_gradient(fn, x: Tensor, h=1e-4):
    """Dense central-difference gradient of scalar fn w.r.t. every x entry."""
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(x.shape)


def analytic_gradient(fn, x: Tensor):
    x.zero_grad()
    with record():
        fn().backward()
    return x.grad


def rel_err(a, b):
    return np.linalg.norm(a - b) / (np.linalg.norm(a) + np.linalg.norm(b) + 1e-12)


class TestElementwise:
    def test_add_vectors(self):
        out = ops.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert np.array_equal(out.data, [4.0, 6.0])

    def test_charbonnier_at_zero(self):
        # sqrt(x^2 + eps^2) at x = 0 equals eps
        eps = 1e-3
        x = Tensor([0.0])
        out = ops.sqrt(ops.add(ops.mul(x, x), eps * eps))
        assert abs(out.item() - eps) < 1e-9

    def test_mul_by_one_is_bitwise_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal(16))
        out = ops.mul(x, 1.0)
        assert np.array_equal(out.data, x.data)

    def test_shape_mismatch_raises(self):
        with pytest.raises(EngineError):
            ops.add(Tensor(np.zeros(3)), Tensor(np.zeros((2, 2))))

    def test_div_by_exact_zero_raises(self):
        with pytest.raises(EngineError):
            ops.div(Tensor([1.0]), Tensor([0.0]))

    def test_sqrt_negative_raises(self):
        with pytest.raises(EngineError):
            ops.sqrt(Tensor([-1.0]))

    def test_clamp_forward_and_mask(self):
        x = Tensor([-1.0, 0.5, 2.0], dtype=np.float64)
        x.requires_grad = True
        with record():
            ops.sum_(ops.clamp(x, 0.0, 1.0)).backward()
        assert np.array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_broadcast_gradient_unbroadcasts(self):
        with precision("float64"):
            a = Tensor(np.random.default_rng(1).standard_normal((2, 3, 4)), requires_grad=True)
            b = Tensor(np.random.default_rng(2).standard_normal((3, 1)), requires_grad=True)
            with record():
                ops.sum_(ops.mul(a, b)).backward()
            assert a.grad.shape == a.shape
            assert b.grad.shape == b.shape
            assert np.allclose(b.grad[:, 0], a.data.sum(axis=(0, 2)))

    def test_finite_screen_raises(self):
        with np.errstate(over="ignore"):
            big = Tensor([1e300])
            with pytest.raises(EngineError, match="non-finite"):
                ops.mul(big, big)

    def test_finite_screen_toggle(self):
        set_finite_checks(False)
        try:
            with np.errstate(over="ignore"):
                out = ops.mul(Tensor([1e300]), Tensor([1e300]))
            assert np.isinf(out.data).all()
        finally:
            set_finite_checks(True)


class TestMatmul:
    def test_identity(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ops.matmul(Tensor(np.eye(2)), x)
        assert np.allclose(out.data, x.data)

    def test_hand_arithmetic(self):
        out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(EngineError):
            ops.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))

    def test_gradient_matches_fd(self):
        with precision("float64"):
            rng = np.random.default_rng(3)
            a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
            b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
            proj = Tensor(rng.standard_normal((3, 2)))
            fn = lambda: ops.sum_(ops.mul(ops.matmul(a, b), proj))
            for t in (a, b):
                assert rel_err(analytic_gradient(fn, t), fd_gradient(fn, t)) < 1e-4

    def test_batched_broadcast_gradient(self):
        with precision("float64"):
            rng = np.random.default_rng(4)
            a = Tensor(rng.standard_normal((2, 2, 3, 4)), requires_grad=True)
            b = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
            proj = Tensor(rng.standard_normal((2, 2, 3, 5)))
            fn = lambda: ops.sum_(ops.mul(ops.matmul(a, b), proj))
            assert rel_err(analytic_gradient(fn, b), fd_gradient(fn, b)) < 1e-4


class TestConv2d:
    def test_identity_1x1_kernel_bitexact(self):
        x = Tensor(np.random.default_rng(5).uniform(0, 1, (1, 1, 5, 5)).astype(np.float32))
        w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        b = Tensor(np.zeros(1, dtype=np.float32))
        out = ops.conv2d(x, w, b)
        assert np.array_equal(out.data, x.data)

    def test_ones_kernel_constant_image(self):
        c = 0.7
        x = Tensor(np.full((1, 1, 6, 6), c))
        w = Tensor(np.ones((1, 1, 3, 3)))
        out = ops.conv2d(x, w, padding=1)
        assert np.allclose(out.data[0, 0, 1:-1, 1:-1], 9 * c, atol=1e-6)

    def test_nonintegral_output_raises(self):
        x = Tensor(np.zeros((1, 1, 5, 5)))
        w = Tensor(np.zeros((1, 1, 2, 2)))
        with pytest.raises(EngineError):
            ops.conv2d(x, w, stride=2)

    def test_group_mismatch_raises(self):
        x = Tensor(np.zeros((1, 4, 4, 4)))
        w = Tensor(np.zeros((4, 4, 3, 3)))
        with pytest.raises(EngineError):
            ops.conv2d(x, w, padding=1, groups=2)

    def test_all_three_gradients_match_fd(self):
        with precision("float64"):
            rng = np.random.default_rng(6)
            x = Tensor(rng.standard_normal((1, 4, 6, 6)), requires_grad=True)
            w = Tensor(rng.standard_normal((8, 4, 3, 3)) * 0.2, requires_grad=True)
            b = Tensor(rng.standard_normal(8) * 0.1, requires_grad=True)
            proj = Tensor(rng.standard_normal((1, 8, 6, 6)))
            fn = lambda: ops.sum_(ops.mul(ops.conv2d(x, w, b, padding=1), proj))
            for t in (x, w, b):
                assert rel_err(analytic_gradient(fn, t), fd_gradient(fn, t)) < 1e-4

    def test_depthwise_gradients_match_fd(self):
        with precision("float64"):
            rng = np.random.default_rng(7)
            x = Tensor(rng.standard_normal((2, 4, 5, 5)), requires_grad=True)
            w = Tensor(rng.standard_normal((4, 1, 3, 3)) * 0.3, requires_grad=True)
            proj = Tensor(rng.standard_normal((2, 4, 5, 5)))
            fn = lambda: ops.sum_(ops.mul(ops.conv2d(x, w, padding=1, groups=4), proj))
            for t in (x, w):
                assert rel_err(analytic_gradient(fn, t), fd_gradient(fn, t)) < 1e-4

    def test_strided_gradients_match_fd(self):
        with precision("float64"):
            rng = np.random.default_rng(8)
            x = Tensor(rng.standard_normal((1, 3, 6, 6)), requires_grad=True)
            w = Tensor(rng.standard_normal((5, 3, 2, 2)) * 0.3, requires_grad=True)
            proj = Tensor(rng.standard_normal((1, 5, 3, 3)))
            fn = lambda: ops.sum_(ops.mul(ops.conv2d(x, w, stride=2), proj))
            for t in (x, w):
                assert rel_err(analytic_gradient(fn, t), fd_gradient(fn, t)) < 1e-4


class TestBilinear:
    def test_constant_invariance(self):
        x = Tensor(np.full((1, 2, 8, 8), 0.42))
        for scale in (0.5, 2.0):
            out = ops.bilinear_resize(x, scale=scale)
            assert np.allclose(out.data, 0.42, atol=1e-7)

    def test_down_up_reproduces_ramp(self):
        ys, xs = np.mgrid[0:16, 0:16].astype(np.float64)
        ramp = (0.3 * xs + 0.5 * ys)[None, None] / 16.0
        x = Tensor(ramp, dtype=np.float64)
        down = ops.bilinear_resize(x, scale=0.5)
        up = ops.bilinear_resize(down, scale=2.0)
        assert np.abs(up.data - ramp).max() < 1e-6

    def test_affine_exact_any_scale(self):
        ys, xs = np.mgrid[0:12, 0:12].astype(np.float64)
        img = (0.25 + 0.01 * xs - 0.02 * ys)[None, None]
        out = ops.bilinear_resize(Tensor(img, dtype=np.float64), scale=1.0 / 3.0)
        oys, oxs = np.mgrid[0:4, 0:4].astype(np.float64)
        src_y = (oys + 0.5) * 3 - 0.5
        src_x = (oxs + 0.5) * 3 - 0.5
        expected = 0.25 + 0.01 * src_x - 0.02 * src_y
        assert np.abs(out.data[0, 0] - expected).max() < 1e-9

    def test_bad_target_raises(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        with pytest.raises(EngineError):
            ops.bilinear_resize(x, scale=0.1)
        with pytest.raises(EngineError):
            ops.bilinear_resize(x, scale=0.3)
        with pytest.raises(EngineError):
            ops.bilinear_resize(x)

    def test_gradient_matches_fd(self):
        with precision("float64"):
            rng = np.random.default_rng(9)
            x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
            proj = Tensor(rng.standard_normal((1, 2, 3, 3)))
            fn = lambda: ops.sum_(ops.mul(ops.bilinear_resize(x, scale=0.5), proj))
            assert rel_err(analytic_gradient(fn, x), fd_gradient(fn, x)) < 1e-4


class TestSoftmax:
    def test_symmetry(self):
        out = ops.softmax(Tensor([0.0, 0.0]))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_shift_invariance_no_overflow(self):
        out = ops.softmax(Tensor([1000.0, 1000.0]))
        assert np.allclose(out.data, [0.5, 0.5])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(10)
        out = ops.softmax(Tensor(rng.standard_normal((3, 4, 5))), axis=-1)
        assert np.abs(out.data.sum(axis=-1) - 1.0).max() < 1e-6
        assert (out.data >= 0).all()

    def test_invalid_axis(self):
        with pytest.raises(EngineError):
            ops.softmax(Tensor([1.0, 2.0]), axis=3)

    def test_gradient_matches_fd(self):
        with precision("float64"):
            rng = np.random.default_rng(11)
            x = Tensor(rng.standard_normal(4), requires_grad=True)
            proj = Tensor(rng.standard_normal(4))
            fn = lambda: ops.sum_(ops.mul(ops.softmax(x, axis=-1), proj))
            assert rel_err(analytic_gradient(fn, x), fd_gradient(fn, x)) < 1e-4


class TestActivations:
    @pytest.mark.parametrize("op", [ops.sigmoid, ops.gelu, ops.relu])
    def test_gradient_matches_fd(self, op):
        with precision("float64"):
            rng = np.random.default_rng(12)
            x = Tensor(rng.standard_normal(32) + 0.01, requires_grad=True)
            proj = Tensor(rng.standard_normal(32))
            fn = lambda: ops.sum_(ops.mul(op(x), proj))
            assert rel_err(analytic_gradient(fn, x), fd_gradient(fn, x)) < 1e-4


class TestShapeOps:
    def test_reshape_permute_concat_slice_pad_gradients(self):
        with precision("float64"):
            rng = np.random.default_rng(13)
            x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)

            def fn():
                y = ops.permute(ops.reshape(x, (2, 12)), (1, 0))
                y = ops.concat([y, y], axis=1)
                y = ops.slice_(y, (slice(2, 10), slice(None)))
                y = ops.pad2d(y, 1)
                proj = Tensor(np.random.default_rng(99).standard_normal(y.shape))
                return ops.sum_(ops.mul(y, proj))

            assert rel_err(analytic_gradient(fn, x), fd_gradient(fn, x)) < 1e-4

    def test_mean_axis_gradients(self):
        with precision("float64"):
            rng = np.random.default_rng(14)
            x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
            fn = lambda: ops.sum_(ops.mul(ops.global_avg_pool(x),
                                          Tensor(np.arange(6, dtype=np.float64).reshape(2, 3, 1, 1))))
            assert rel_err(analytic_gradient(fn, x), fd_gradient(fn, x)) < 1e-4

    def test_transpose_last2(self):
        x = Tensor(np.arange(24).reshape(2, 3, 4).astype(np.float32))
        out = ops.transpose_last2(x)
        assert out.shape == (2, 4, 3)
        assert np.array_equal(out.data, x.data.swapaxes(-1, -2))


class TestBackwardDriver:
    def test_sum_gradient_is_ones(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with record():
            ops.sum_(x).backward()
        assert np.array_equal(x.grad, np.ones((2, 2)))

    def test_quadratic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with record():
            ops.sum_(ops.mul(x, x)).backward()
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_fanout_accumulation_exact(self):
        x = Tensor([3.0], requires_grad=True)
        with record():
            y = ops.add(x, x)
            ops.sum_(y).backward()
        assert np.array_equal(x.grad, [2.0])

    def test_aliased_gradient_paths(self):
        # x feeds two adds whose backward returns the same array object;
        # accumulation must not cross-contaminate siblings
        with precision("float64"):
            x = Tensor([1.0, 2.0], requires_grad=True)
            y = Tensor([5.0, 1.0], requires_grad=True)
            with record():
                s = ops.add(x, y)
                t = ops.add(s, s)
                u = ops.mul(t, Tensor([2.0, 3.0]))
                ops.sum_(u).backward()
            assert np.array_equal(x.grad, [4.0, 6.0])
            assert np.array_equal(y.grad, [4.0, 6.0])

    def test_non_scalar_root_raises(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with record():
            y = ops.mul(x, 2.0)
            with pytest.raises(EngineError, match="scalar"):
                y.backward()

    def test_off_tape_root_raises(self):
        x = Tensor([1.0], requires_grad=True)
        with record():
            with pytest.raises(EngineError, match="tape"):
                x.backward()

    def test_no_tape_raises(self):
        x = Tensor([1.0], requires_grad=True)
        y = ops.sum_(x)
        with pytest.raises(EngineError):
            y.backward()

    def test_unreachable_leaves_have_no_grad(self):
        x = Tensor([1.0], requires_grad=True)
        z = Tensor([1.0], requires_grad=True)
        with record():
            ops.sum_(ops.mul(x, 2.0)).backward()
        assert x.grad is not None
        assert z.grad is None

    def test_ops_without_live_inputs_not_recorded(self):
        a = Tensor([1.0])
        with record() as tape:
            ops.add(a, a)
            assert len(tape.nodes) == 0
            b = Tensor([1.0], requires_grad=True)
            ops.add(a, b)
            assert len(tape.nodes) == 1


class TestPrecisionMode:
    def test_default_float32(self):
        assert Tensor([1.0]).dtype == np.float32

    def test_precision_context(self):
        with precision("float64"):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32
