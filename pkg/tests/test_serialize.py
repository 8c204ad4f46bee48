import io
import struct

import numpy as np
import pytest

from uhddip.errors import IngestError
from uhddip.serialize import (load_checkpoint, load_tensor, read_tensor, save_checkpoint, save_tensor,
                              write_tensor)


def test_tensor_record_layout():
    buf = io.BytesIO()
    write_tensor(buf, np.arange(6, dtype=np.float32).reshape(2, 3))
    raw = buf.getvalue()
    assert raw[:8] == b"UHDTNSR1"
    assert struct.unpack("<I", raw[8:12]) == (2,)
    assert struct.unpack("<2Q", raw[12:28]) == (2, 3)
    assert len(raw) == 28 + 6 * 4


def test_tensor_round_trip(tmp_path, rng):
    arr = rng.standard_normal((3, 1, 4)).astype(np.float32)
    save_tensor(tmp_path / "t.bin", arr)
    back = load_tensor(tmp_path / "t.bin")
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)


def test_truncated_and_bad_magic():
    buf = io.BytesIO()
    write_tensor(buf, np.ones(4, np.float32))
    with pytest.raises(IngestError):
        read_tensor(io.BytesIO(buf.getvalue()[:-2]))
    with pytest.raises(IngestError):
        read_tensor(io.BytesIO(b"NOTATENS" + buf.getvalue()[8:]))


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"a.w": rng.standard_normal((2, 2)).astype(np.float32), "b": np.zeros(3, np.float32)}
    save_checkpoint(tmp_path / "c.ckpt", params, {"step": 3})
    back, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert list(back) == ["a.w", "b"]
    assert meta == {"step": 3}
    np.testing.assert_array_equal(back["a.w"], params["a.w"])


def test_checkpoint_errors(tmp_path):
    with pytest.raises(IngestError):
        load_checkpoint(tmp_path / "missing.ckpt")
    (tmp_path / "junk").write_bytes(b"garbage!")
    with pytest.raises(IngestError):
        load_checkpoint(tmp_path / "junk")
