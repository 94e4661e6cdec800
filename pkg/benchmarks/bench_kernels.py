"""Benchmark the numba kernels against the pure-numpy fallback.

Times the hot paths (convolution forward/backward, bilinear resampling,
streak rasterization) on training-representative shapes and reports the
per-call wall time of both backends plus the speedup. The numba path is
warmed once per shape so JIT compilation is excluded from the timings.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from elf_derain.kernels import numba_backend, numpy_backend


def timeit(fn, repeats):
    fn()  # warmup / JIT
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_case(name, np_fn, nb_fn, repeats):
    t_np = timeit(np_fn, repeats)
    t_nb = timeit(nb_fn, repeats)
    print(f"{name:<42} numpy {t_np * 1e3:8.3f} ms   numba {t_nb * 1e3:8.3f} ms   "
          f"speedup {t_np / t_nb:5.2f}x")


def main():
    parser = argparse.ArgumentParser(description="numba vs numpy kernel benchmark")
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--batch", type=int, default=2)
    parser.add_argument("--channels", type=int, default=8)
    parser.add_argument("--size", type=int, default=32)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    n, c, hw = args.batch, args.channels, args.size
    x = rng.standard_normal((n, c, hw, hw)).astype(np.float32)
    w = rng.standard_normal((c, c, 3, 3)).astype(np.float32)
    wd = rng.standard_normal((c, 1, 3, 3)).astype(np.float32)
    b = rng.standard_normal(c).astype(np.float32)
    g = rng.standard_normal((n, c, hw, hw)).astype(np.float32)

    print(f"shapes: x={x.shape} w={w.shape} repeats={args.repeats}\n")
    # dense convs: compare the pure loop kernels against the BLAS im2col path
    # (this measurement is why the numba backend routes dense convs to BLAS)
    xp = numba_backend._pad_nchw(x, 1)
    bench_case(
        f"dense conv fwd, BLAS vs loops ({c}->{c})",
        lambda: numpy_backend.conv2d_forward(x, w, b, 1, 1, 1),
        lambda: numba_backend._conv2d_fwd(xp, w, 1, 1, hw, hw),
        args.repeats,
    )
    bench_case(
        "dense conv bwd input, BLAS vs loops",
        lambda: numpy_backend.conv2d_backward_input(g, w, x.shape, 1, 1, 1),
        lambda: numba_backend._conv2d_bwd_input(g, w, 1, 1, hw + 2, hw + 2),
        args.repeats,
    )
    bench_case(
        "dense conv bwd weight, BLAS vs loops",
        lambda: numpy_backend.conv2d_backward_weight(g, x, w.shape, 1, 1, 1),
        lambda: numba_backend._conv2d_bwd_weight(g, xp, c, 3, 3, 1, 1),
        args.repeats,
    )
    bench_case(
        f"depthwise conv 3x3 fwd (groups={c})",
        lambda: numpy_backend.conv2d_forward(x, wd, b, 1, 1, c),
        lambda: numba_backend.conv2d_forward(x, wd, b, 1, 1, c),
        args.repeats,
    )
    bench_case(
        "depthwise conv 3x3 bwd input",
        lambda: numpy_backend.conv2d_backward_input(g, wd, x.shape, 1, 1, c),
        lambda: numba_backend.conv2d_backward_input(g, wd, x.shape, 1, 1, c),
        args.repeats,
    )
    bench_case(
        "bilinear up x2 fwd",
        lambda: numpy_backend.bilinear_forward(x, hw * 2, hw * 2),
        lambda: numba_backend.bilinear_forward(x, hw * 2, hw * 2),
        args.repeats,
    )
    g2 = rng.standard_normal((n, c, hw * 2, hw * 2)).astype(np.float32)
    bench_case(
        "bilinear up x2 bwd",
        lambda: numpy_backend.bilinear_backward(g2, hw, hw),
        lambda: numba_backend.bilinear_backward(g2, hw, hw),
        args.repeats,
    )
    segs = rng.uniform(0, 128, (64, 6))
    segs[:, 4] = rng.uniform(1, 3, 64)
    segs[:, 5] = rng.uniform(0.2, 0.8, 64)
    bench_case(
        "rasterize 64 streaks on 128x128",
        lambda: numpy_backend.rasterize_streaks(128, 128, segs),
        lambda: numba_backend.rasterize_streaks(128, 128, segs),
        args.repeats,
    )


if __name__ == "__main__":
    main()
