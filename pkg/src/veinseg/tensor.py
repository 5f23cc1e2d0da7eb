"""Dense 4-D tensors in (batch, channel, height, width) layout."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import InvalidDimsError, ShapeError

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)
_ALLOWED = (F32, F64)


def _check_dims(dims: Sequence[int]) -> tuple[int, int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 4:
        raise InvalidDimsError(f"expected 4 extents, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise InvalidDimsError(f"all extents must be >= 1, got {dims}")
    return dims


class Tensor4:
    """Immutable-by-convention (n, c, h, w) array of f32 or f64 values."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.asarray(data)
        if arr.dtype not in _ALLOWED:
            raise ShapeError(f"unsupported dtype {arr.dtype}; use f32 or f64")
        if arr.ndim != 4:
            raise InvalidDimsError(f"expected 4-D data, got {arr.ndim}-D")
        _check_dims(arr.shape)
        self.data = np.ascontiguousarray(arr)

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.dims != (1, 1, 1, 1):
            raise ShapeError(f"item() requires dims (1,1,1,1), got {self.dims}")
        return float(self.data[0, 0, 0, 0])

    def astype(self, dtype) -> "Tensor4":
        return Tensor4(self.data.astype(dtype))

    def copy(self) -> "Tensor4":
        return Tensor4(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor4(dims={self.dims}, dtype={self.dtype})"


def zeros(dims: Sequence[int], dtype=F32) -> Tensor4:
    return Tensor4(np.zeros(_check_dims(dims), dtype=dtype))


def ones(dims: Sequence[int], dtype=F32) -> Tensor4:
    return Tensor4(np.ones(_check_dims(dims), dtype=dtype))


def full(dims: Sequence[int], value: float, dtype=F32) -> Tensor4:
    return Tensor4(np.full(_check_dims(dims), value, dtype=dtype))


def scalar(value: float, dtype=F64) -> Tensor4:
    return Tensor4(np.full((1, 1, 1, 1), value, dtype=dtype))


def from_flat(dims: Sequence[int], values: Sequence[float], dtype=F32) -> Tensor4:
    """Build from a row-major flat sequence; length must match exactly."""
    dims = _check_dims(dims)
    arr = np.asarray(values, dtype=dtype).ravel()
    expected = dims[0] * dims[1] * dims[2] * dims[3]
    if arr.size != expected:
        raise InvalidDimsError(f"data length {arr.size} != n*c*h*w = {expected}")
    return Tensor4(arr.reshape(dims))
