"""NCHW tensor type and the gradient tape.

The tape is rebuilt on every forward pass: ops append nodes in execution
order and ``backward`` replays them strictly in reverse, summing the
contributions of tensors that are consumed more than once. Scalars default
to float32; ``precision("float64")`` switches the whole engine for gradient
checking.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class EngineError(Exception):
    """Raised for contract violations inside the tensor engine."""


_DTYPE = np.float32
_CHECK_FINITE = True


def set_default_dtype(name: str) -> None:
    global _DTYPE
    if name not in ("float32", "float64"):
        raise EngineError(f"unsupported dtype {name!r}")
    _DTYPE = np.float32 if name == "float32" else np.float64


def default_dtype() -> np.dtype:
    return np.dtype(_DTYPE)


@contextmanager
def precision(name: str):
    """Temporarily switch the engine scalar width ('float32' or 'float64')."""
    prev = "float32" if _DTYPE is np.float32 else "float64"
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf screen applied after every forward primitive."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def check_finite(op: str, arr: np.ndarray) -> None:
    if _CHECK_FINITE and not np.isfinite(arr).all():
        raise EngineError(f"{op}: non-finite values in forward result")


class Tensor:
    """Dense array plus optional gradient buffer and tape handle."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_nid")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else _DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._tape: Optional[Tape] = None
        self._nid: Optional[int] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node_id(self) -> Optional[int]:
        tape = active_tape()
        if tape is not None and self._tape is tape:
            return self._nid
        return None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def backward(self) -> None:
        from .ops import backward

        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.grad is not None})"

    # operator sugar; the real work lives in ops.py
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


class TapeNode:
    __slots__ = ("op", "input_ids", "output_id", "backward_fn")

    def __init__(self, op: str, input_ids: Sequence[int], output_id: int,
                 backward_fn: Callable[[np.ndarray], Iterable[Optional[np.ndarray]]]):
        self.op = op
        self.input_ids = tuple(input_ids)
        self.output_id = output_id
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of forward primitives; ids index creation order.

    ``live`` holds the ids that depend on a gradient-requiring leaf; only ops
    touching a live tensor are recorded, and backward only materializes
    gradients for live inputs.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.leaves: dict[int, Tensor] = {}
        self.live: set[int] = set()
        self._next_id = 0

    def register(self, t: Tensor) -> int:
        """Give a tensor an id on this tape (leaf if it was created off-tape)."""
        if t._tape is self and t._nid is not None:
            return t._nid
        nid = self._next_id
        self._next_id = nid + 1
        t._tape = self
        t._nid = nid
        self.leaves[nid] = t
        if t.requires_grad:
            self.live.add(nid)
        return nid

    def is_live(self, t: Tensor) -> bool:
        if t.requires_grad:
            return True
        return t._tape is self and t._nid is not None and t._nid in self.live

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward_fn) -> None:
        input_ids = [self.register(t) for t in inputs]
        nid = self._next_id
        self._next_id = nid + 1
        out._tape = self
        out._nid = nid
        self.live.add(nid)
        self.nodes.append(TapeNode(op, input_ids, nid, backward_fn))


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def record():
    """Open a fresh tape; ops executed inside are differentiable."""
    tape = Tape()
    _TAPE_STACK.append(tape)
    try:
        yield tape
    finally:
        _TAPE_STACK.pop()
