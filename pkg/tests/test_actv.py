import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from difftl.actv import ActvFormatError, read_actv, write_actv


def test_header_layout(tmp_path):
    path = tmp_path / "a.actv"
    write_actv(path, np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = path.read_bytes()
    assert raw[:4] == b"ACTV"
    assert struct.unpack_from("<IBB", raw, 4) == (1, 1, 2)
    assert struct.unpack_from("<2Q", raw, 10) == (2, 3)
    assert np.frombuffer(raw[26:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_float64_round_trip(tmp_path):
    a = np.random.default_rng(0).standard_normal((4, 5))
    write_actv(tmp_path / "d.actv", a, dtype="float64")
    assert np.array_equal(read_actv(tmp_path / "d.actv"), a)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(0, 6), st.integers(1, 6)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_round_trip_is_exact(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("actv") / "x.actv"
    write_actv(path, a)
    b = read_actv(path)
    assert b.dtype == np.float32 and b.shape == a.shape and np.array_equal(a, b)


def test_corrupt_files_rejected(tmp_path):
    path = tmp_path / "a.actv"
    write_actv(path, np.zeros((2, 2)))
    raw = path.read_bytes()
    for bad in (b"NOPE" + raw[4:], raw[:-1], raw[:4] + struct.pack("<I", 9) + raw[8:],
                raw[:8] + b"\x07" + raw[9:]):
        path.write_bytes(bad)
        with pytest.raises(ActvFormatError):
            read_actv(path)
    with pytest.raises(ActvFormatError):
        write_actv(path, np.zeros(2, dtype=np.int64), dtype=np.int64)
