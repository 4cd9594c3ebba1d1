"""Little-endian named-tensor container shared by checkpoints and dataset files.

Layout::

    magic      4 bytes (b"MQTM" checkpoints, b"MQTD" dataset calls)
    version    u32
    header     u32 byte length + UTF-8 JSON (sorted keys)
    count      u32 number of records
    record*    u16 name length, UTF-8 name, u8 dtype code, u8 rank,
               u32 * rank dims, raw little-endian element data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

VERSION = 1

DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("u1"): 4,
    np.dtype("<i8"): 5,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


class FormatError(ValueError):
    """Raised for unreadable, truncated or mismatched container files."""


def encode(magic: bytes, header: dict, tensors: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [magic, struct.pack("<II", version, len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in DTYPE_CODES:
            raise FormatError(f"unsupported dtype {arr.dtype} for record {name!r}")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes, magic: bytes, source: str = "<bytes>",
           versions: tuple[int, ...] = (VERSION,)) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(data, source)
    got = r.take(4)
    if got != magic:
        raise FormatError(f"{source}: bad magic {got!r}, expected {magic!r}")
    version, head_len = r.unpack("<II")
    if version not in versions:
        raise FormatError(f"{source}: unsupported version {version}")
    try:
        header = json.loads(r.take(head_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt header ({exc})") from None
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, rank = r.unpack("<BB")
        if code not in CODE_DTYPES:
            raise FormatError(f"{source}: record {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I")
        dt = CODE_DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if r.pos != len(data):
        raise FormatError(f"{source}: {len(data) - r.pos} trailing bytes")
    return header, tensors


def write_file(path: str | Path, magic: bytes, header: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(magic, header, tensors))


def read_file(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    return decode(path.read_bytes(), magic, str(path))
