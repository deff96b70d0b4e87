"""Binary checkpoints: named float32 tensors, optimizer buffers, progress.

Layout, all little-endian: magic ``FCKP``, format version uint32, then two
entry blocks (parameters, then optimizer velocity buffers), each a uint32
count followed by entries of (name length uint32, name bytes, rank uint32,
extents uint32 each, float32 payload), then the iteration counter uint64,
then an optional uint32-length-prefixed UTF-8 blob holding the run
configuration as key=value lines.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"FCKP"
FORMAT_VERSION = 1
_NAME_LIMIT = 4096
_RANK_LIMIT = 8


@dataclass
class Checkpoint:
    params: dict = field(default_factory=dict)  # name -> float32 ndarray
    velocity: dict = field(default_factory=dict)  # name -> float32 ndarray
    iteration: int = 0
    config_text: str = ""


def _pack_entries(entries: dict) -> bytes:
    out = [struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        nb = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<I", a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    blob = checkpoint.config_text.encode("utf-8")
    payload = b"".join(
        [
            MAGIC,
            struct.pack("<I", FORMAT_VERSION),
            _pack_entries(checkpoint.params),
            _pack_entries(checkpoint.velocity),
            struct.pack("<Q", checkpoint.iteration),
            struct.pack("<I", len(blob)),
            blob,
        ]
    )
    with open(path, "wb") as fh:
        fh.write(payload)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"{self.path}: truncated checkpoint reading {what} at byte {self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def _read_entries(r: _Reader, block: str) -> dict:
    count = r.u32(f"{block} count")
    entries = {}
    for i in range(count):
        name_len = r.u32(f"{block} entry {i} name length")
        if name_len > _NAME_LIMIT:
            raise FormatError(f"{r.path}: entry name of {name_len} bytes is not plausible")
        name = r.take(name_len, f"{block} entry {i} name").decode("utf-8")
        if name in entries:
            raise FormatError(f"{r.path}: duplicate {block} entry {name!r}")
        rank = r.u32(f"{name} rank")
        if rank > _RANK_LIMIT:
            raise FormatError(f"{r.path}: rank {rank} for {name!r} is not plausible")
        extents = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} extents"))
        size = int(np.prod(extents, dtype=np.int64)) if rank else 1
        raw = r.take(4 * size, f"{name} payload")
        entries[name] = np.frombuffer(raw, dtype="<f4").reshape(extents).copy()
    return entries


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {MAGIC!r}")
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    params = _read_entries(r, "parameter")
    velocity = _read_entries(r, "optimizer")
    iteration = r.u64("iteration")
    config_text = ""
    if r.pos < len(data):
        blob_len = r.u32("config length")
        config_text = r.take(blob_len, "config").decode("utf-8")
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes at byte {r.pos}")
    return Checkpoint(params, velocity, iteration, config_text)
