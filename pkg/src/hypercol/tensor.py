"""Dense 4-D (batch, channel, height, width) tensors with tape-based reverse-mode autodiff.

Tensors are immutable values: the wrapped numpy array is C-contiguous,
read-only, and either float32 (training storage) or float64 (used by the
finite-difference checks, which re-run the same code paths in double
precision). Operations live in :mod:`hypercol.ops`; they call
:func:`record_op` so that, while a :class:`Tape` is active, a backward
closure is recorded for every op whose inputs require gradients.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import AutogradError, GradCheckError, ShapeError
from .rng import STREAM_FILL, make_rng

Shape = tuple[int, int, int, int]

# Flat indices are computed with int64 arithmetic; cap well below 2**63.
MAX_ELEMENTS = 1 << 48

# Ops verify their outputs are finite (the package-wide invariant that no op
# produces NaN/Inf). Left on by default; flip for micro-benchmarks only.
FINITE_CHECKS = True

_ids = itertools.count(1)


def _check_dtype(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ShapeError(f"tensors are float32 or float64, got {dt}")
    return dt


def validate_shape(shape: Sequence[int]) -> Shape:
    """Check a 4-tuple of non-negative dims whose product fits index arithmetic."""
    if len(shape) != 4:
        raise ShapeError(f"expected a 4-tuple (n, c, h, w), got {tuple(shape)}")
    dims = tuple(int(d) for d in shape)
    if any(d < 0 for d in dims):
        raise ShapeError(f"negative dimension in shape {dims}")
    total = 1
    for d in dims:
        total *= d
    if total > MAX_ELEMENTS:
        raise ShapeError(f"shape {dims} overflows the supported index range")
    return dims  # type: ignore[return-value]


class Tensor:
    """Immutable NCHW value. ``data`` is flat row-major (n-major, w-minor)."""

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        arr = np.array(arr, dtype=_check_dtype(dtype), order="C", copy=True)
        if arr.ndim != 4:
            raise ShapeError(f"tensor data must be 4-D, got shape {arr.shape}")
        validate_shape(arr.shape)
        if FINITE_CHECKS and not np.isfinite(arr).all():
            raise ShapeError("tensor construction received non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @staticmethod
    def _wrap(arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Adopt an array the caller owns (no copy). Internal fast path for ops."""
        t = object.__new__(Tensor)
        arr = np.ascontiguousarray(arr)
        if FINITE_CHECKS and not np.isfinite(arr).all():
            raise ShapeError("operation produced non-finite values")
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = bool(requires_grad)
        t.id = next(_ids)
        return t

    @property
    def shape(self) -> Shape:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """The read-only backing array."""
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def astype(self, dtype, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor._wrap(self.data.astype(_check_dtype(dtype)), requires_grad=rg)

    def __repr__(self) -> str:
        return (
            f"Tensor(shape={self.shape}, dtype={self.dtype.name},"
            f" requires_grad={self.requires_grad})"
        )


# --------------------------------------------------------------------------
# creation
# --------------------------------------------------------------------------


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.zeros(validate_shape(shape), dtype=_check_dtype(dtype)), requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.ones(validate_shape(shape), dtype=_check_dtype(dtype)), requires_grad)


def full(shape, value: float, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(
        np.full(validate_shape(shape), value, dtype=_check_dtype(dtype)), requires_grad
    )


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return make_rng(int(seed), STREAM_FILL)


def uniform(shape, seed, lo: float = 0.0, hi: float = 1.0, dtype=np.float32,
            requires_grad: bool = False) -> Tensor:
    """Uniform fill on [lo, hi); deterministic for an integer seed."""
    if lo > hi:
        raise ShapeError(f"uniform bounds out of order: lo={lo} > hi={hi}")
    rng = _as_rng(seed)
    arr = rng.uniform(lo, hi, size=validate_shape(shape)).astype(_check_dtype(dtype))
    return Tensor._wrap(arr, requires_grad)


def kaiming(shape, seed, fan_in: int, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    """Normal fill with std sqrt(2 / fan_in) (he-style init for ReLU nets)."""
    if fan_in <= 0:
        raise ShapeError(f"fan_in must be positive, got {fan_in}")
    rng = _as_rng(seed)
    std = np.sqrt(2.0 / fan_in)
    arr = rng.normal(0.0, std, size=validate_shape(shape)).astype(_check_dtype(dtype))
    return Tensor._wrap(arr, requires_grad)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

# A backward rule maps the output gradient array to one gradient array (or
# None) per recorded input. Saved forward context lives in the closure.
BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class TapeNode:
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered record of executed ops; inputs of a node always precede it."""

    nodes: list[TapeNode] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack.pop()
        assert popped is self, "tapes must nest"


_tape_stack: list[Tape] = []


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def record_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, recording it when a tape is active and grads are needed."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.nodes.append(
            TapeNode(op, tuple(t.id for t in inputs), out.id, backward_fn)
        )
    return out


class Gradients:
    """Map from tensor id to gradient tensor, as produced by :func:`backward`."""

    def __init__(self, by_id: dict[int, Tensor]):
        self.by_id = by_id

    def of(self, t: Tensor) -> Tensor | None:
        return self.by_id.get(t.id)

    def __len__(self) -> int:
        return len(self.by_id)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep from a scalar loss recorded on ``tape``.

    The loss seeds with gradient one; fan-out accumulates additively. Every
    requires_grad tensor reachable from the loss ends up in the returned map
    with a gradient of identical shape.
    """
    if loss.shape != (1, 1, 1, 1):
        raise AutogradError(f"loss must have shape (1,1,1,1), got {loss.shape}")
    produced = {node.output_id for node in tape.nodes}
    if loss.id not in produced:
        raise AutogradError("loss tensor was not produced on this tape")

    acc: dict[int, np.ndarray] = {loss.id: np.ones((1, 1, 1, 1), dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        gout = acc.get(node.output_id)
        if gout is None:
            continue
        grads = node.backward(gout)
        if len(grads) != len(node.input_ids):
            raise AutogradError(
                f"op {node.op!r} returned {len(grads)} gradients for "
                f"{len(node.input_ids)} inputs"
            )
        for tid, g in zip(node.input_ids, grads):
            if g is None:
                continue
            prev = acc.get(tid)
            acc[tid] = g if prev is None else prev + g
    return Gradients({tid: Tensor._wrap(np.ascontiguousarray(arr)) for tid, arr in acc.items()})


# --------------------------------------------------------------------------
# finite-difference checking
# --------------------------------------------------------------------------


def grad_check(op_closure, inputs: Sequence[Tensor], eps: float = 1e-3,
               tolerance: float | None = 1e-4) -> float:
    """Compare analytic gradients of ``op_closure(*inputs)`` with central differences.

    The closure must map the inputs to a scalar tensor. Everything is re-run
    in float64. Returns the max over all input elements of
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`` and raises
    :class:`GradCheckError` when a tolerance is given and exceeded.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    inputs64 = [
        Tensor(t.numpy(), requires_grad=True, dtype=np.float64) for t in inputs
    ]
    with Tape() as tape:
        loss = op_closure(*inputs64)
    if loss.shape != (1, 1, 1, 1):
        raise AutogradError(f"grad_check closure must return a scalar, got {loss.shape}")
    grads = backward(tape, loss)

    def eval_at(arrays: list[np.ndarray]) -> float:
        frozen = [Tensor(a, dtype=np.float64) for a in arrays]
        return op_closure(*frozen).item()

    base = [t.numpy().copy() for t in inputs64]
    max_err = 0.0
    for i, t in enumerate(inputs64):
        analytic_t = grads.of(t)
        analytic = (
            analytic_t.numpy() if analytic_t is not None else np.zeros_like(base[i])
        ).ravel()
        flat = base[i].ravel()
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = eval_at(base)
            flat[j] = orig - eps
            f_minus = eval_at(base)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1e-8, abs(analytic[j]) + abs(numeric))
            max_err = max(max_err, abs(analytic[j] - numeric) / denom)
    if tolerance is not None and max_err > tolerance:
        raise GradCheckError(
            f"gradient check failed: max relative error {max_err:.3e} > {tolerance:.1e}"
        )
    return max_err
