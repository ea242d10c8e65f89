import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from granular_ot.errors import FormatError
from granular_ot.tensor_io import load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes


class TestTensorRecord:
    def test_layout(self):
        buf = tensor_to_bytes(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        assert buf[:4] == b"TNS1"
        assert struct.unpack_from("<III", buf, 4) == (2, 2, 3)
        assert struct.unpack_from("<6d", buf, 16) == (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
        assert len(buf) == 16 + 48

    def test_scalar_keeps_rank_zero(self):
        buf = tensor_to_bytes(np.float64(2.5))
        assert struct.unpack_from("<I", buf, 4) == (0,)
        back, end = tensor_from_bytes(buf)
        assert back.shape == () and back.item() == 2.5 and end == len(buf)

    def test_fortran_order_written_row_major(self):
        a = np.asfortranarray(np.arange(6.0).reshape(2, 3))
        back, _ = tensor_from_bytes(tensor_to_bytes(a))
        np.testing.assert_array_equal(back, a)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=4)))
    def test_round_trip_is_bit_exact(self, a):
        buf = tensor_to_bytes(a)
        back, end = tensor_from_bytes(buf)
        assert back.shape == a.shape and back.tobytes() == a.tobytes() and end == len(buf)

    def test_reads_at_offset(self):
        buf = b"junk" + tensor_to_bytes(np.ones(2)) + tensor_to_bytes(np.zeros(3))
        a, pos = tensor_from_bytes(buf, 4)
        b, end = tensor_from_bytes(buf, pos)
        assert a.tolist() == [1.0, 1.0] and b.tolist() == [0.0] * 3 and end == len(buf)

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic") as exc:
            tensor_from_bytes(b"TNS2" + bytes(8))
        assert exc.value.offset == 0

    @pytest.mark.parametrize("cut", [2, 6, 10, 20])
    def test_truncated(self, cut):
        buf = tensor_to_bytes(np.ones((2, 2)))
        with pytest.raises(FormatError, match="truncated"):
            tensor_from_bytes(buf[:cut])

    def test_file_round_trip(self, tmp_path):
        a = np.random.default_rng(0).normal(size=(3, 4))
        save_tensor(tmp_path / "a.tns", a)
        assert load_tensor(tmp_path / "a.tns").tobytes() == a.tobytes()
