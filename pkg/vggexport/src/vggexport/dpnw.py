"""Minimal DPNW tensor container writer/reader.

Independent implementation of the interchange format: magic `DPNW`,
little-endian u32 version (1) and entry count, then entries sorted by
name.  Each entry is u16 name length, UTF-8 name, u8 rank, rank u32
dims, u8 dtype tag (0 = float32), u8 frozen flag, u32 CRC32 of the
payload, u64 payload length, then raw little-endian float32 data.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"DPNW"
VERSION = 1
DTYPE_F32 = 0


class DpnwError(Exception):
    pass


def _pack_entry(name: str, data: np.ndarray, frozen: bool) -> bytes:
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb
    head += struct.pack("<B", data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape)
    head += struct.pack("<BB", DTYPE_F32, 1 if frozen else 0)
    head += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    head += struct.pack("<Q", len(payload))
    return head + payload


def write(path, entries: dict) -> None:
    """Write {name: (array, frozen flag)} atomically, sorted by name."""
    path = Path(path)
    blob = MAGIC + struct.pack("<II", VERSION, len(entries))
    for name in sorted(entries):
        data, frozen = entries[name]
        blob += _pack_entry(name, np.asarray(data), frozen)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read(path) -> dict:
    """Read a DPNW file into {name: (array, frozen flag)}."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise DpnwError(f"{path} is not a DPNW container")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DpnwError(f"{path}: unsupported container version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dtype, frozen = struct.unpack_from("<BB", blob, pos)
        pos += 2
        (crc,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        (plen,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        payload = blob[pos : pos + plen]
        pos += plen
        if dtype != DTYPE_F32:
            raise DpnwError(f"{name}: unsupported dtype tag {dtype}")
        if len(payload) != plen:
            raise DpnwError(f"{name}: payload truncated")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise DpnwError(f"{name}: checksum mismatch")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        out[name] = (arr, bool(frozen))
    return out
