import struct

import numpy as np
import pytest

from gorender import tensorio
from gorender.errors import ContainerError


def test_header_layout():
    blob = tensorio.encode(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert blob[:4] == b"GORT"
    assert struct.unpack_from("<IBB", blob, 4) == (1, 0, 2)
    assert struct.unpack_from("<2Q", blob, 10) == (2, 3)
    assert len(blob) == 10 + 16 + 24
    assert np.frombuffer(blob[26:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_round_trip(tmp_path, rng):
    a = rng.normal(size=(3, 4, 5)).astype(np.float32)
    a[0, 0, 0] = np.inf
    tensorio.save(tmp_path / "a.gort", a)
    b = tensorio.load(tmp_path / "a.gort")
    assert b.dtype == np.float32 and np.array_equal(a, b)


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 2) + b[8:],
    lambda b: b[:8] + b"\x07" + b[9:],
    lambda b: b[:-4],
])
def test_corrupt(mutate):
    blob = tensorio.encode(np.zeros((2, 2), np.float32))
    with pytest.raises(ContainerError):
        tensorio.decode(mutate(blob))
