"""Dense float64 tensors.

A tensor is a C-contiguous ``numpy.ndarray`` of dtype float64. The helpers here
are the only place shapes are combined: no operation broadcasts, and none of
them mutates its inputs.
"""

from collections.abc import Sequence
from typing import Literal

import numpy as np
import numpy.typing as npt

from src.errors import IndexOutOfRange, ShapeMismatch

Tensor = npt.NDArray[np.float64]

UnaryOp = Literal["relu", "exp", "log"]
BinaryOp = Literal["add", "sub", "mul", "scale"]

_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}
_UNARY = {
    "relu": lambda x: np.maximum(x, 0.0),
    "exp": np.exp,
    "log": np.log,
}


def as_tensor(data: npt.ArrayLike, shape: Sequence[int] | None = None) -> Tensor:
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    if shape is not None:
        return reshape(arr, shape)
    return arr


def _check_extents(shape: Sequence[int]) -> tuple[int, ...]:
    extents = tuple(int(s) for s in shape)
    if any(s <= 0 for s in extents):
        raise ShapeMismatch(f"extents must be positive, got {list(extents)}")
    return extents


def reshape(t: Tensor, new_shape: Sequence[int]) -> Tensor:
    extents = _check_extents(new_shape)
    if int(np.prod(extents)) != t.size:
        raise ShapeMismatch(
            f"cannot reshape {list(t.shape)} ({t.size}) to {list(extents)}"
        )
    return np.ascontiguousarray(t, dtype=np.float64).reshape(extents).copy()


def flat(t: Tensor, i: int) -> float:
    if not 0 <= i < t.size:
        raise IndexOutOfRange(f"flat index {i} outside [0, {t.size})")
    return float(t.reshape(-1)[i])


def at(t: Tensor, idx: Sequence[int]) -> float:
    if len(idx) != t.ndim or any(not 0 <= k < s for k, s in zip(idx, t.shape)):
        raise IndexOutOfRange(f"index {list(idx)} outside shape {list(t.shape)}")
    return flat(t, int(np.ravel_multi_index(tuple(idx), t.shape)))


def elementwise(
    op: UnaryOp | BinaryOp, a: Tensor, b: Tensor | float | None = None
) -> Tensor:
    if op in _UNARY:
        return _UNARY[op](np.asarray(a, dtype=np.float64))
    if op == "scale":
        if not np.isscalar(b):
            raise ShapeMismatch("scale expects a scalar factor")
        return np.asarray(a, dtype=np.float64) * float(b)
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op: {op}")

    rhs = np.asarray(b, dtype=np.float64)
    if rhs.ndim == 0:
        return _BINARY[op](np.asarray(a, dtype=np.float64), float(rhs))
    if a.shape != rhs.shape:
        raise ShapeMismatch(f"{op}: shapes {list(a.shape)} and {list(rhs.shape)} differ")
    return _BINARY[op](a, rhs)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(
            f"matmul inner dims differ: {list(a.shape)} x {list(b.shape)}"
        )
    return np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
