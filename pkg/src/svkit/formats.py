"""Binary containers: ``SVCK`` model checkpoints and ``SVEB`` embedding archives.

SVCK layout (little-endian)::

    b"SVCK" | version u32 | config length u32 | canonical JSON config
    | tensor count u32 | per tensor: name length u16, UTF-8 name, rank u32,
      dims u64 * rank, float32 data | CRC-32 of all preceding bytes u32

SVEB layout (little-endian)::

    b"SVEB" | version u32 | dim u32 | count u64
    | per record: id length u16, UTF-8 id, float32 * dim
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from svkit.errors import FormatError

CHECKPOINT_MAGIC = b"SVCK"
ARCHIVE_MAGIC = b"SVEB"
FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {self.what}: needed {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", FORMAT_VERSION)]
    cfg = canonical_json(config).encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"tensor {name} has non-finite values")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns ``(config, tensors)``; tensors come back as float64."""
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an SVCK checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{path}: checksum mismatch")
    r = _Reader(body, "checkpoint")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    config = json.loads(r.take(cfg_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        n = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float64).reshape(dims)
    if r.pos != len(body):
        raise FormatError(f"{path}: trailing bytes after tensors")
    return config, tensors


def write_archive(path, records: list[tuple[str, np.ndarray]], dim: int | None = None) -> None:
    if dim is None:
        if not records:
            raise FormatError("cannot infer the dimension of an empty archive")
        dim = int(np.asarray(records[0][1]).shape[0])
    parts = [ARCHIVE_MAGIC, struct.pack("<IIQ", FORMAT_VERSION, dim, len(records))]
    seen = set()
    for utt_id, vec in records:
        vec = np.asarray(vec)
        if vec.shape != (dim,):
            raise FormatError(f"record {utt_id!r} has shape {vec.shape}, expected ({dim},)")
        if utt_id in seen:
            raise FormatError(f"duplicate archive id {utt_id!r}")
        seen.add(utt_id)
        raw = utt_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"id too long: {utt_id[:40]}...")
        parts.append(struct.pack("<H", len(raw)) + raw + vec.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_archive(path) -> dict[str, np.ndarray]:
    """Ordered mapping ``id -> float64 vector``."""
    data = Path(path).read_bytes()
    if data[:4] != ARCHIVE_MAGIC:
        raise FormatError(f"{path}: not an SVEB archive")
    r = _Reader(data, "embedding archive")
    r.take(4)
    version, dim, count = r.unpack("<IIQ")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported archive version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        utt_id = r.take(n).decode("utf-8")
        if utt_id in out:
            raise FormatError(f"{path}: duplicate id {utt_id!r}")
        out[utt_id] = np.frombuffer(r.take(4 * dim), dtype="<f4").astype(np.float64)
    if r.pos != len(data):
        raise FormatError(f"{path}: trailing bytes after {count} records")
    return out
