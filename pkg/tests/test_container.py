import os
import struct

import numpy as np
import pytest

from stedrmgc import container
from stedrmgc.errors import DataError


def test_round_trip_and_layout(rng):
    arrays = {"b": rng.normal(size=(2, 3)), "a": np.arange(4.0)}
    blob = container.encode("thing", arrays, {"x": 1})
    assert blob[:8] == b"STEDRMGC"
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    assert version == 1
    assert len(blob) == 20 + hlen + 8 * 10
    out, meta = container.decode(blob, expect_kind="thing")
    assert list(out) == ["b", "a"] and meta == {"x": 1}
    for k in arrays:
        assert np.array_equal(out[k], arrays[k])


def test_encoding_is_deterministic(rng):
    arrays = {"w": rng.normal(size=(5,))}
    assert container.encode("k", arrays, {"b": 1, "a": 2}) == container.encode("k", arrays, {"a": 2, "b": 1})


def test_rejects_bad_input():
    good = container.encode("k", {"w": np.ones(3)})
    with pytest.raises(DataError, match="magic"):
        container.decode(b"XXXXXXXX" + good[8:])
    with pytest.raises(DataError, match="truncated"):
        container.decode(good[:-1])
    with pytest.raises(DataError, match="truncated"):
        container.decode(good[:5])
    with pytest.raises(DataError, match="expected"):
        container.decode(good, expect_kind="other")
    with pytest.raises(DataError, match="version"):
        container.decode(good[:8] + struct.pack("<I", 9) + good[12:])


def test_atomic_write_replaces_and_leaves_no_temp(tmp_path):
    target = tmp_path / "sub" / "f.bin"
    container.atomic_write(target, b"one")
    container.atomic_write(target, "two")
    assert target.read_text() == "two"
    assert os.listdir(target.parent) == ["f.bin"]
    umask = os.umask(0)
    os.umask(umask)
    assert target.stat().st_mode & 0o777 == 0o666 & ~umask


def test_load_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        container.load(tmp_path / "absent.bin")
