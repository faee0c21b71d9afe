from __future__ import annotations

import numpy as np
import pytest

from s2embed.nn import load_checkpoint, save_checkpoint


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        tensors = {
            "enc.0.w": rng.standard_normal((4, 6)).astype(np.float32),
            "enc.0.b": rng.standard_normal(6).astype(np.float32),
            "scalar": np.array([3.0], dtype=np.float32),
            "cube": rng.standard_normal((2, 3, 4)).astype(np.float32),
        }
        path = tmp_path / "p.bin"
        save_checkpoint(path, tensors)
        back = load_checkpoint(path)
        assert set(back) == set(tensors)
        for name, want in tensors.items():
            assert back[name].dtype == np.float32
            np.testing.assert_array_equal(back[name], want)

    def test_float64_roundtrips_as_float32(self, tmp_path):
        path = tmp_path / "p.bin"
        save_checkpoint(path, {"w": np.array([1.0, 1.0 / 3.0])})
        back = load_checkpoint(path)
        np.testing.assert_array_equal(
            back["w"], np.array([1.0, 1.0 / 3.0], dtype=np.float32))

    def test_bytes_independent_of_insertion_order(self, tmp_path):
        a = {"x": np.ones(2, np.float32), "y": np.zeros(3, np.float32)}
        b = {"y": np.zeros(3, np.float32), "x": np.ones(2, np.float32)}
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_checkpoint(p1, a)
        save_checkpoint(p2, b)
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_layout(self, tmp_path):
        path = tmp_path / "p.bin"
        save_checkpoint(path, {"ab": np.zeros((2, 2), np.float32)})
        blob = path.read_bytes()
        assert blob[:4] == b"S2VP"
        assert int.from_bytes(blob[4:6], "little") == 1
        assert int.from_bytes(blob[6:10], "little") == 1
        assert int.from_bytes(blob[10:12], "little") == 2
        assert blob[12:14] == b"ab"
        assert blob[14] == 2
        assert int.from_bytes(blob[15:19], "little") == 2
        assert int.from_bytes(blob[19:23], "little") == 2
        assert len(blob) == 23 + 16

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"WHAT" + b"\0" * 8)
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(path)

    def test_trailing_garbage_detected(self, tmp_path):
        path = tmp_path / "p.bin"
        save_checkpoint(path, {"w": np.zeros(1, np.float32)})
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(path)
