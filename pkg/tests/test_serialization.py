"""Blob and checkpoint round-trips must be bitwise exact."""

import io
import struct

import numpy as np
import pytest

from labelmask import serialization as ser
from labelmask.errors import FormatError


class TestBlob:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip_is_bitwise(self, dtype):
        rng = np.random.default_rng(0)
        arr = rng.standard_normal((3, 4, 5)).astype(dtype)
        buf = io.BytesIO()
        ser.write_blob(buf, arr, "weights")
        buf.seek(0)
        name, back = ser.read_blob(buf)
        assert name == "weights"
        assert back.dtype == arr.dtype
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()

    def test_scalar_and_empty_shapes(self):
        for arr in [np.float64(3.25).reshape(()), np.zeros((0, 4), dtype=np.float32)]:
            buf = io.BytesIO()
            ser.write_blob(buf, np.asarray(arr), "t")
            buf.seek(0)
            _, back = ser.read_blob(buf)
            assert back.shape == np.asarray(arr).shape
            assert back.tobytes() == np.asarray(arr).tobytes()

    def test_truncated_payload_rejected(self):
        buf = io.BytesIO()
        ser.write_blob(buf, np.ones(8, dtype=np.float64), "t")
        clipped = io.BytesIO(buf.getvalue()[:-4])
        with pytest.raises(FormatError, match="truncated payload"):
            ser.read_blob(clipped)

    def test_truncated_header_rejected(self):
        buf = io.BytesIO(struct.pack("<I", 100) + b"{}")
        with pytest.raises(FormatError, match="truncated header"):
            ser.read_blob(buf)

    def test_integer_dtype_rejected_on_write(self):
        with pytest.raises(FormatError, match="dtype"):
            ser.write_blob(io.BytesIO(), np.arange(3), "t")

    def test_values_survive_exactly(self):
        # values with no short decimal representation
        arr = np.array([1 / 3, np.pi, 1e-300, -0.0], dtype=np.float64)
        buf = io.BytesIO()
        ser.write_blob(buf, arr, "t")
        buf.seek(0)
        _, back = ser.read_blob(buf)
        np.testing.assert_array_equal(
            back.view(np.uint64), arr.view(np.uint64)
        )


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        tensors = {
            "label_table": rng.standard_normal((6, 16)).astype(np.float32),
            "state_table": rng.standard_normal((3, 16)).astype(np.float32),
            "cls_b": np.zeros(6, dtype=np.float32),
        }
        meta = {"labels": ["a", "b"], "config": {"embed_dim": 16}}
        path = tmp_path / "model.ckpt"
        ser.write_checkpoint(path, tensors, meta)
        back, meta_back = ser.read_checkpoint(path)
        assert meta_back == meta
        assert list(back) == list(tensors)
        for name in tensors:
            assert back[name].tobytes() == tensors[name].tobytes()
            assert back[name].dtype == tensors[name].dtype

    def test_write_is_deterministic(self, tmp_path):
        tensors = {"w": np.arange(12, dtype=np.float32).reshape(3, 4)}
        meta = {"seed": 7}
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        ser.write_checkpoint(p1, tensors, meta)
        ser.write_checkpoint(p2, tensors, meta)
        assert p1.read_bytes() == p2.read_bytes()

    def test_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        ser.write_checkpoint(path, {"w": np.zeros(1, dtype=np.float32)}, {})
        raw = bytearray(path.read_bytes())
        # bump the version digit inside the manifest
        idx = raw.find(b'"format_version":1')
        raw[idx + len(b'"format_version":')] = ord("9")
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            ser.read_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "model.ckpt"
        ser.write_checkpoint(path, {"w": np.ones((4, 4), dtype=np.float64)}, {})
        path.write_bytes(path.read_bytes()[:-17])
        with pytest.raises(FormatError):
            ser.read_checkpoint(path)
