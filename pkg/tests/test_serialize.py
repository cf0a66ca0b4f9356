"""Byte-level contracts for TSR1 records, checkpoints, and PPM images."""

import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from ministory import serialize as S
from ministory.tensor import ContractError, Parameter


class TestTsr1:
    def test_header_layout_is_bit_specified(self):
        buf = io.BytesIO()
        S.write_tensor(buf, np.arange(6, dtype=np.float32).reshape(2, 3))
        raw = buf.getvalue()
        assert raw[:4] == b"TSR1"
        assert struct.unpack("<I", raw[4:8]) == (2,)
        assert struct.unpack("<II", raw[8:16]) == (2, 3)
        assert np.frombuffer(raw[16:], dtype="<f4").tolist() == [0, 1, 2, 3, 4, 5]

    @settings(max_examples=40, deadline=None)
    @given(
        hnp.arrays(
            np.float32,
            hnp.array_shapes(min_dims=0, max_dims=4, min_side=1, max_side=5),
            elements=st.floats(-1e6, 1e6, width=32),
        )
    )
    def test_round_trip_bit_exact(self, arr):
        buf = io.BytesIO()
        S.write_tensor(buf, arr)
        buf.seek(0)
        back = S.read_tensor(buf)
        assert back.shape == arr.shape
        assert back.tobytes() == arr.tobytes()

    def test_bad_magic_rejected(self):
        with pytest.raises(S.FormatError, match="magic"):
            S.read_tensor(io.BytesIO(b"NOPE" + b"\x00" * 16))

    def test_truncation_rejected(self):
        buf = io.BytesIO()
        S.write_tensor(buf, np.ones((4, 4), dtype=np.float32))
        clipped = io.BytesIO(buf.getvalue()[:-3])
        with pytest.raises(S.FormatError, match="truncated"):
            S.read_tensor(clipped)


class TestCheckpoint:
    def test_round_trip_preserves_names_and_bytes(self, tmp_path):
        rng = np.random.default_rng(0)
        params = [
            Parameter("a.w", rng.normal(size=(3, 4)).astype(np.float32)),
            Parameter("a.b", rng.normal(size=(4,)).astype(np.float32)),
            Parameter("head", rng.normal(size=(2, 2, 2)).astype(np.float32)),
        ]
        path = tmp_path / "model.ckpt"
        S.save_checkpoint(path, params)
        loaded = S.load_checkpoint(path)
        assert list(loaded) == ["a.w", "a.b", "head"]
        for p in params:
            assert loaded[p.name].tobytes() == p.data.tobytes()

    def test_duplicate_names_rejected_on_save(self, tmp_path):
        params = [
            Parameter("w", np.zeros(2, dtype=np.float32)),
            Parameter("w", np.ones(2, dtype=np.float32)),
        ]
        with pytest.raises(ContractError, match="duplicate"):
            S.save_checkpoint(tmp_path / "x.ckpt", params)

    def test_restore_strict_on_missing_and_shape(self, tmp_path):
        p = Parameter("w", np.zeros((2, 2), dtype=np.float32))
        path = tmp_path / "m.ckpt"
        S.save_checkpoint(path, [p])
        loaded = S.load_checkpoint(path)

        with pytest.raises(ContractError, match="missing"):
            S.restore_parameters(
                [p, Parameter("v", np.zeros(1, dtype=np.float32))], loaded
            )
        bad = Parameter("w", np.zeros((3, 2), dtype=np.float32))
        with pytest.raises(ContractError, match="shape"):
            S.restore_parameters([bad], loaded)

    def test_restore_copies_values(self, tmp_path):
        src = Parameter("w", np.full((2, 3), 5.0, dtype=np.float32))
        path = tmp_path / "m.ckpt"
        S.save_checkpoint(path, [src])
        dst = Parameter("w", np.zeros((2, 3), dtype=np.float32))
        S.restore_parameters([dst], S.load_checkpoint(path))
        assert np.array_equal(dst.data, src.data)


class TestPpm:
    def test_pixel_mapping_rounds_half_away_from_zero(self):
        # v = -1 -> 0; v = 1 -> 255; v = 0 -> 127.5 -> 128 (away from zero).
        img = np.array([[[-1.0, 1.0, 0.0]]], dtype=np.float32)
        assert S.image_to_bytes(img).tolist() == [[[0, 255, 128]]]

    def test_out_of_range_values_clamp(self):
        img = np.array([[[-2.0, 2.0, 1.0]]], dtype=np.float32)
        assert S.image_to_bytes(img).tolist() == [[[0, 255, 255]]]

    def test_header_and_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        img = (rng.uniform(-1, 1, size=(16, 16, 3))).astype(np.float32)
        path = tmp_path / "img.ppm"
        S.save_ppm(path, img)
        raw = path.read_bytes()
        assert raw.startswith(b"P6\n16 16\n255\n")
        assert len(raw) == len(b"P6\n16 16\n255\n") + 16 * 16 * 3

        back = S.load_ppm(path)
        # Quantization to 8 bits costs at most half a step each way.
        assert np.max(np.abs(back - np.clip(img, -1, 1))) <= (1.0 / 255.0)

    def test_byte_exact_write_read_write(self, tmp_path):
        img = np.linspace(-1, 1, 16 * 16 * 3, dtype=np.float32).reshape(16, 16, 3)
        p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
        S.save_ppm(p1, img)
        S.save_ppm(p2, S.load_ppm(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_non_p6(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(S.FormatError):
            S.load_ppm(path)
