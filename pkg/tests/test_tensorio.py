import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentfield import tensorio
from latentfield.errors import FormatError


def test_header_layout_and_payload_order():
    a = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    blob = tensorio.pack_tensor(a)
    magic, code, rank, reserved, d0, d1, d2 = struct.unpack("<4sBBH3I", blob[:20])
    assert (magic, code, rank, reserved, (d0, d1, d2)) == (b"LTE1", 0, 3, 0, (2, 3, 4))
    assert tensorio.HEADER_SIZE == 20
    assert np.frombuffer(blob[20:], "<f4").tolist() == list(range(24))


def test_lower_rank_dims_are_zero_padded():
    blob = tensorio.pack_tensor(np.zeros(5, dtype=np.float64))
    _, code, rank, _, *dims = struct.unpack("<4sBBH3I", blob[:20])
    assert (code, rank, dims) == (1, 1, [5, 0, 0])


@settings(max_examples=40, deadline=None)
@given(
    arrays(
        dtype=st.sampled_from([np.float32, np.float64]),
        shape=st.lists(st.integers(1, 5), min_size=0, max_size=3).map(tuple),
        elements=st.floats(-1e6, 1e6, width=32),
    )
)
def test_roundtrip_bit_exact(a):
    b = tensorio.unpack_tensor(tensorio.pack_tensor(a))
    assert b.dtype == a.dtype and b.shape == a.shape
    assert a.tobytes() == b.tobytes()


def test_stream_reads_consecutive_tensors():
    buf = io.BytesIO(tensorio.pack_tensor(np.ones((2, 2))) + tensorio.pack_tensor(np.zeros(3, np.float32)))
    assert tensorio.read_tensor_from(buf).shape == (2, 2)
    assert tensorio.read_tensor_from(buf).shape == (3,)


@pytest.mark.parametrize(
    "blob",
    [b"", b"LTE1", b"XXXX" + bytes(16), tensorio.pack_tensor(np.ones((4, 4)))[:-1]],
    ids=["empty", "short-header", "bad-magic", "truncated-payload"],
)
def test_malformed_blobs_raise(blob):
    with pytest.raises(FormatError):
        tensorio.unpack_tensor(blob)


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        tensorio.read_tensor(tmp_path / "nope.lte")


def test_rank_four_rejected():
    with pytest.raises(FormatError):
        tensorio.pack_tensor(np.zeros((1, 1, 1, 1)))
