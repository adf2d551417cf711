"""Reverse-mode differentiation over an explicit operation tape.

Values are plain numpy arrays. A :class:`Var` pairs a value with an additive
gradient buffer; every differentiable op executed while a :class:`Tape` is
active appends one node holding a closure that pushes the output gradient back
to its inputs. Outside a tape the ops are pure numpy functions.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, List, Optional, Union

import numpy as np

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "gridvit_active_tape", default=None
)
_DEFAULT_DTYPE: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "gridvit_default_dtype", default=np.dtype(np.float32)
)


def default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE.get()


@contextlib.contextmanager
def precision(dtype) -> Iterator[np.dtype]:
    """Temporarily switch the default float type (``"float32"`` or ``"float64"``)."""
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dt}")
    token = _DEFAULT_DTYPE.set(dt)
    try:
        yield dt
    finally:
        _DEFAULT_DTYPE.reset(token)


def as_tensor(x, dtype=None) -> np.ndarray:
    """Coerce to a contiguous float array of the requested (or default) dtype."""
    return np.ascontiguousarray(x, dtype=dtype or default_dtype())


class Var:
    """A value together with its accumulated gradient (a dual value)."""

    __slots__ = ("value", "_grad", "name")

    def __init__(self, value, name: str | None = None):
        self.value = np.asarray(value)
        self._grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    def zero_grad(self) -> None:
        self._grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise AssertionError(f"gradient shape {g.shape} != value shape {self.value.shape}")
        if self._grad is None:
            self._grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self._grad += g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape}, dtype={self.value.dtype})"

    # operator sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


ArrayLike = Union[Var, np.ndarray]


def value_of(x: ArrayLike) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


class _Node:
    __slots__ = ("out", "backward")

    def __init__(self, out: Var, backward: Callable[[np.ndarray], None]):
        self.out = out
        self.backward = backward


class Tape:
    """Records differentiable ops executed inside ``with tape:``.

    ``backward`` may be called more than once; intermediate gradients are
    cleared first so only leaf gradients accumulate across calls.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, out: Var, backward: Callable[[np.ndarray], None]) -> None:
        self.nodes.append(_Node(out, backward))

    def backward(self, out: Var, seed: Optional[np.ndarray] = None) -> None:
        for node in self.nodes:
            node.out.zero_grad()
        if seed is None:
            if out.value.size != 1:
                raise ValueError("backward without a seed requires a scalar output")
            seed = np.ones_like(out.value)
        out.accumulate(np.asarray(seed, dtype=out.value.dtype))
        for node in reversed(self.nodes):
            if node.out._grad is not None:
                node.backward(node.out._grad)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def make_output(value: np.ndarray, inputs, backward: Callable[[np.ndarray], None]):
    """Wrap ``value`` as a recorded Var when any input is a Var under a tape.

    Otherwise return the bare array, which keeps inference on the fast path.
    """
    tape = _ACTIVE_TAPE.get()
    if tape is None or not any(isinstance(x, Var) for x in inputs):
        return value
    out = Var(value)
    tape.record(out, backward)
    return out


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)
