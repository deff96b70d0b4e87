"""Binary image and flow file formats.

Frames are binary PPM (P6), labels and masks binary PGM (P5), both with
maxval fixed at 255. Flow fields use the Middlebury .flo layout: the 4-byte
magic "PIEH", width and height as little-endian int32, then row-major
interleaved (dx, dy) float32 pairs. Malformed files raise FormatError with
the byte offset of the problem.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError, ShapeError

FLO_MAGIC = b"PIEH"
_DIM_LIMIT = 1 << 16  # reject absurd header dimensions before allocating


def _read_netpbm_header(buf: bytes, magic: bytes, path) -> tuple[list[int], int]:
    """Parse 'P6'/'P5', width, height, maxval; returns fields and raster offset."""
    if buf[:2] != magic:
        raise FormatError(f"{path}: bad magic {buf[:2]!r} at byte 0, expected {magic!r}")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(buf):  # whitespace and # comments separate tokens
            ch = buf[pos : pos + 1]
            if ch.isspace():
                pos += 1
            elif ch == b"#":
                nl = buf.find(b"\n", pos)
                pos = len(buf) if nl == -1 else nl + 1
            else:
                break
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        tok = buf[start:pos]
        if not tok:
            raise FormatError(f"{path}: truncated header at byte {pos}")
        if not tok.isdigit():
            raise FormatError(f"{path}: bad header token {tok!r} at byte {start}")
        fields.append(int(tok))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if not (0 < w < _DIM_LIMIT and 0 < h < _DIM_LIMIT):
        raise FormatError(f"{path}: unreasonable dimensions {w}x{h} in header")
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported, expected 255")
    return fields, pos


def _read_raster(buf: bytes, pos: int, count: int, path) -> np.ndarray:
    data = buf[pos : pos + count]
    if len(data) < count:
        raise FormatError(
            f"{path}: truncated raster at byte {len(buf)}, expected {pos + count} bytes"
        )
    return np.frombuffer(data, dtype=np.uint8)


def write_ppm(path, frame: np.ndarray) -> None:
    """Write a (3, H, W) float array in [0, 1] as binary PPM."""
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise ShapeError(f"frame must be (3, H, W), got {frame.shape}")
    _, h, w = frame.shape
    quantized = np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(quantized.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into a (3, H, W) float64 array in [0, 1]."""
    with open(path, "rb") as f:
        buf = f.read()
    (w, h, _), pos = _read_netpbm_header(buf, b"P6", path)
    raster = _read_raster(buf, pos, w * h * 3, path)
    return raster.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm(path, gray: np.ndarray) -> None:
    """Write a (H, W) uint8 array as binary PGM."""
    if gray.ndim != 2:
        raise ShapeError(f"gray image must be (H, W), got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(gray, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into a (H, W) uint8 array; maxval must be 255."""
    with open(path, "rb") as f:
        buf = f.read()
    (w, h, _), pos = _read_netpbm_header(buf, b"P5", path)
    raster = _read_raster(buf, pos, w * h, path)
    return raster.reshape(h, w).copy()


def write_flo(path, flow: np.ndarray) -> None:
    """Write a (2, H, W) flow field (channel 0 = dx, 1 = dy) as .flo."""
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must be (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    with open(path, "wb") as f:
        f.write(FLO_MAGIC)
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(flow.transpose(1, 2, 0).astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    """Read a .flo file into a (2, H, W) float32 array."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != FLO_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at byte 0, expected {FLO_MAGIC!r}")
    if len(buf) < 12:
        raise FormatError(f"{path}: truncated header at byte {len(buf)}")
    w, h = (int(v) for v in np.frombuffer(buf[4:12], dtype="<i4"))
    if not (0 < w < _DIM_LIMIT and 0 < h < _DIM_LIMIT):
        raise FormatError(f"{path}: unreasonable dimensions {w}x{h} in header")
    need = 12 + w * h * 8
    if len(buf) < need:
        raise FormatError(f"{path}: truncated payload at byte {len(buf)}, expected {need} bytes")
    data = np.frombuffer(buf[12:need], dtype="<f4").reshape(h, w, 2)
    return np.ascontiguousarray(data.transpose(2, 0, 1))
