"""Image/flow format round-trips and malformed-file handling."""

import numpy as np
import pytest

from flowcast.errors import FormatError, ShapeError
from flowcast.fileio import read_flo, read_pgm, read_ppm, write_flo, write_pgm, write_ppm


class TestPpm:
    def test_round_trip_quantized_frame(self, tmp_path):
        rng = np.random.default_rng(0)
        frame = np.round(rng.random((3, 5, 7)) * 255.0) / 255.0
        path = tmp_path / "f.ppm"
        write_ppm(path, frame)
        np.testing.assert_array_equal(read_ppm(path), frame)

    def test_unquantized_values_round_to_nearest_255th(self, tmp_path):
        frame = np.full((3, 2, 2), 0.5)
        path = tmp_path / "f.ppm"
        write_ppm(path, frame)
        assert read_ppm(path)[0, 0, 0] == pytest.approx(128 / 255)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "f.ppm"
        write_ppm(path, np.zeros((3, 1, 2)))
        raw = path.read_bytes()
        assert raw.startswith(b"P6\n2 1\n255\n")
        assert len(raw) == len(b"P6\n2 1\n255\n") + 6

    def test_header_comments_skipped(self, tmp_path):
        path = tmp_path / "c.ppm"
        path.write_bytes(b"P6 # comment\n# another\n2 1\n255\n" + bytes(6))
        assert read_ppm(path).shape == (3, 1, 2)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P3\n1 1\n255\n\0\0\0")
        with pytest.raises(FormatError, match="byte 0"):
            read_ppm(path)

    def test_truncated_raster_reports_offset(self, tmp_path):
        path = tmp_path / "short.ppm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(5))  # needs 12
        with pytest.raises(FormatError, match="byte"):
            read_ppm(path)

    def test_wrong_shape_rejected(self, tmp_path):
        with pytest.raises(ShapeError):
            write_ppm(tmp_path / "x.ppm", np.zeros((1, 4, 4)))


class TestPgm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, (6, 4)).astype(np.uint8)
        path = tmp_path / "l.pgm"
        write_pgm(path, img)
        out = read_pgm(path)
        assert out.dtype == np.uint8
        np.testing.assert_array_equal(out, img)

    def test_maxval_must_be_255(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n2 2\n128\n" + bytes(4))
        with pytest.raises(FormatError, match="maxval"):
            read_pgm(path)

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "t.pgm"
        path.write_bytes(b"P5\n2")
        with pytest.raises(FormatError):
            read_pgm(path)


class TestFlo:
    def test_header_bytes(self, tmp_path):
        path = tmp_path / "f.flo"
        write_flo(path, np.zeros((2, 64, 128), dtype=np.float32))
        raw = path.read_bytes()
        assert raw[:4] == b"PIEH"
        assert np.frombuffer(raw[4:12], dtype="<i4").tolist() == [128, 64]
        assert len(raw) == 12 + 64 * 128 * 8

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        flow = rng.standard_normal((2, 3, 5)).astype(np.float32)
        path = tmp_path / "f.flo"
        write_flo(path, flow)
        out = read_flo(path)
        assert out.dtype == np.float32
        np.testing.assert_array_equal(out, flow)

    def test_interleaving_is_dx_then_dy(self, tmp_path):
        flow = np.zeros((2, 1, 2), dtype=np.float32)
        flow[0, 0, 0] = 3.0  # dx of pixel 0
        flow[1, 0, 1] = -2.0  # dy of pixel 1
        path = tmp_path / "f.flo"
        write_flo(path, flow)
        payload = np.frombuffer(path.read_bytes()[12:], dtype="<f4")
        np.testing.assert_array_equal(payload, [3.0, 0.0, 0.0, -2.0])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.flo"
        path.write_bytes(b"HEIP" + bytes(16))
        with pytest.raises(FormatError, match="byte 0"):
            read_flo(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = tmp_path / "short.flo"
        write_flo(path, np.zeros((2, 4, 4), dtype=np.float32))
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(FormatError, match=f"byte {len(raw) - 8}"):
            read_flo(path)

    def test_unreasonable_dimensions(self, tmp_path):
        path = tmp_path / "huge.flo"
        path.write_bytes(b"PIEH" + np.array([1 << 24, 2], dtype="<i4").tobytes() + bytes(64))
        with pytest.raises(FormatError, match="dimensions"):
            read_flo(path)
