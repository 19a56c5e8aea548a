import struct

import numpy as np
import pytest

from hisem import checkpoint
from hisem.checkpoint import CheckpointError


def _tensors():
    rng = np.random.default_rng(0)
    return {
        "a.weight": rng.normal(size=(3, 4)),
        "scalar": np.array(2.5),
        "empty": np.zeros((0, 3)),
        "nested.deep.v": rng.normal(size=(2, 1, 3)),
    }


def test_round_trip_bit_exact(tmp_path):
    t = _tensors()
    checkpoint.save(tmp_path / "c.hsem", t)
    back = checkpoint.load(tmp_path / "c.hsem")
    assert list(back) == list(t)
    for k in t:
        assert back[k].shape == t[k].shape and back[k].dtype == np.float64
        assert back[k].tobytes() == t[k].tobytes()


def test_dumps_is_deterministic():
    assert checkpoint.dumps(_tensors()) == checkpoint.dumps(_tensors())


def test_header_layout():
    buf = checkpoint.dumps({"x": np.ones(2)})
    assert buf[:4] == b"HSEM"
    assert struct.unpack_from("<II", buf, 4) == (checkpoint.VERSION, 1)
    assert len(buf) == 12 + 4 + 1 + 4 + 4 + 16


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"NOPE" + checkpoint.dumps({"x": np.ones(1)})[4:])


def test_unknown_version():
    buf = bytearray(checkpoint.dumps({"x": np.ones(1)}))
    buf[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.loads(bytes(buf))


@pytest.mark.parametrize("cut", [6, 14, 20, -3])
def test_truncation_detected(cut):
    buf = checkpoint.dumps({"x": np.arange(4.0)})
    with pytest.raises(CheckpointError):
        checkpoint.loads(buf[:cut])


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        checkpoint.load(tmp_path / "absent.hsem")
