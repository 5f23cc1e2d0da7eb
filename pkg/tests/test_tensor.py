import numpy as np
import pytest

from veinseg.errors import InvalidDimsError, ShapeError
from veinseg.tensor import F32, F64, Tensor4, from_flat, full, ones, zeros


def test_zeros_2x2():
    t = zeros((1, 1, 2, 2))
    assert t.dims == (1, 1, 2, 2)
    assert t.data.ravel().tolist() == [0, 0, 0, 0]


def test_zeros_bulk():
    t = zeros((2, 3, 4, 5), dtype=F64)
    assert t.size == 120
    assert not t.data.any()
    assert t.dtype == F64


def test_zero_extent_rejected():
    with pytest.raises(InvalidDimsError):
        zeros((1, 1, 1, 0))


@pytest.mark.parametrize("dims", [(0, 1, 1, 1), (1, -1, 2, 2), (1, 1, 2)])
def test_bad_dims_rejected(dims):
    with pytest.raises(InvalidDimsError):
        zeros(dims)


def test_from_flat_roundtrip():
    t = from_flat((1, 2, 1, 3), [1, 2, 3, 4, 5, 6])
    assert t.data[0, 1, 0, 2] == 6.0


def test_from_flat_length_mismatch():
    with pytest.raises(InvalidDimsError):
        from_flat((1, 1, 2, 2), [1, 2, 3])


def test_dtype_policy():
    with pytest.raises(ShapeError):
        Tensor4(np.zeros((1, 1, 2, 2), dtype=np.int32))
    assert zeros((1, 1, 1, 1)).dtype == F32  # f32 is the compute default


def test_item_requires_scalar():
    assert full((1, 1, 1, 1), 2.5).item() == 2.5
    with pytest.raises(ShapeError):
        ones((1, 1, 1, 2)).item()


def test_non_4d_rejected():
    with pytest.raises(InvalidDimsError):
        Tensor4(np.zeros((2, 2, 2), dtype=np.float32))
