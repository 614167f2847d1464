"""Binary tensor container ("SPLR" files) used by checkpoints and datasets.

Layout, all little-endian::

    b"SPLR" | version u32 | record count u32
    per record: name length u16 | UTF-8 name | dtype u8 (0=f32, 1=f64)
                | rank u8 | extents u64 * rank | raw data
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SPLR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ContainerFormatError(ValueError):
    pass


def encode(records: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise ContainerFormatError(f"record {name!r}: unsupported dtype {arr.dtype}")
        tag = _TAGS[arr.dtype]
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ContainerFormatError(f"record name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerFormatError(f"truncated container: need {n} bytes at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ContainerFormatError("bad magic bytes; not an SPLR container")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ContainerFormatError(f"unsupported container version {version}")
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _DTYPES:
            raise ContainerFormatError(f"record {name!r}: unknown dtype tag {tag}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(bytes(take(nbytes)), dtype=dtype).reshape(shape)
        records[name] = data.astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise ContainerFormatError(f"{len(view) - pos} trailing bytes after last record")
    return records


def write_container(path: str | Path, records: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(records))


def read_container(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
