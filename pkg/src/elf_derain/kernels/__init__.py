"""Backend dispatch for the hot numeric kernels.

The environment flag ``ELF_DERAIN_BACKEND`` selects the implementation:

* ``numba`` - JIT kernels (default when numba imports cleanly)
* ``numpy`` - pure-numpy fallback
* ``auto``  - numba if available, else numpy

``benchmarks/bench_kernels.py`` compares the two side by side.
"""

from __future__ import annotations

import os

from . import numpy_backend

_KERNEL_NAMES = (
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_weight",
    "bilinear_forward",
    "bilinear_backward",
    "rasterize_streaks",
)

conv_out_size = numpy_backend.conv_out_size

_active_name = "numpy"


def use_backend(name: str) -> str:
    """Bind the package-level kernel functions to the named backend."""
    global _active_name
    if name == "auto":
        try:
            from . import numba_backend as impl

            name = "numba"
        except ImportError:
            impl = numpy_backend
            name = "numpy"
    elif name == "numba":
        from . import numba_backend as impl
    elif name == "numpy":
        impl = numpy_backend
    else:
        raise ValueError(f"unknown kernel backend {name!r} (expected numba, numpy or auto)")
    for fn in _KERNEL_NAMES:
        globals()[fn] = getattr(impl, fn)
    _active_name = name
    return name


def backend_name() -> str:
    return _active_name


use_backend(os.environ.get("ELF_DERAIN_BACKEND", "auto"))
