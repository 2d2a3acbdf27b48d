"""DPNW binary container for named tensors, and golden-activation checks.

Layout (all integers little-endian, no padding):

    magic "DPNW" | u32 version=1 | u32 entry count
    per entry, sorted lexicographically by name:
        u16 name length | name UTF-8 | u8 ndim | ndim x u32 dims |
        u8 dtype tag (0 = f32) | u8 frozen flag |
        u32 CRC32(payload) | u64 payload length | payload (LE f32)

Optimizer state rides along under the ``optim/`` prefix, architecture
metadata under ``meta/``, golden fixtures use ``golden/input`` and
``golden/tap1`` .. ``golden/tap5``.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, CheckpointError, ChecksumError,
                     TruncatedError, VersionError)
from .model import EncoderConfig, GeneratorConfig
from .optim import AdamState
from .params import ParamStore

MAGIC = b"DPNW"
VERSION = 1
DTYPE_F32 = 0
GOLDEN_TOLERANCE = 1e-4


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


def write_container(path, entries: dict) -> None:
    """Write {name: (array, frozen flag)} atomically, sorted by name."""
    path = Path(path)
    blob = MAGIC + struct.pack("<II", VERSION, len(entries))
    for name in sorted(entries):
        data, frozen = entries[name]
        blob += _pack_entry(name, np.asarray(data), frozen)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e


def read_container(path) -> dict:
    """Read a DPNW file into {name: (array, frozen flag)}, verifying CRCs."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path} does not start with the DPNW magic bytes")
    if len(blob) < 12:
        raise TruncatedError(f"{path} ends inside the header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise VersionError(
            f"{path} has container version {version}; this reader supports {VERSION}"
        )
    pos = 12
    out: dict = {}

    def take(n: int, what: str) -> int:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedError(f"{path} ends inside {what}")
        pos += n
        return pos - n

    for _ in range(count):
        at = take(2, "a name length")
        (nlen,) = struct.unpack_from("<H", blob, at)
        at = take(nlen, "a name")
        name = blob[at : at + nlen].decode("utf-8")
        at = take(1, f"{name} ndim")
        ndim = blob[at]
        at = take(4 * ndim, f"{name} dims")
        dims = struct.unpack_from(f"<{ndim}I", blob, at)
        at = take(2, f"{name} dtype/frozen")
        dtype_tag, frozen = blob[at], blob[at + 1]
        if dtype_tag != DTYPE_F32:
            raise VersionError(f"{path} entry {name} has unknown dtype tag {dtype_tag}")
        at = take(4, f"{name} checksum")
        (crc,) = struct.unpack_from("<I", blob, at)
        at = take(8, f"{name} payload length")
        (plen,) = struct.unpack_from("<Q", blob, at)
        at = take(plen, f"{name} payload")
        payload = blob[at : at + plen]
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise ChecksumError(f"{path} entry {name} fails its CRC32 check")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if name in out:
            raise CheckpointError(f"{path} contains duplicate entry {name}")
        out[name] = (arr, bool(frozen))
    if pos != len(blob):
        raise CheckpointError(f"{path} has {len(blob) - pos} trailing bytes")
    return out


def save_checkpoint(params: ParamStore, path, optim: AdamState | None = None,
                    meta: dict | None = None) -> None:
    entries = {name: (p.data, not p.trainable) for name, p in params.items()}
    if optim is not None:
        entries["optim/t"] = (np.array([optim.t], dtype=np.float32), False)
        for name, m in optim.m.items():
            entries[f"optim/m/{name}"] = (m, False)
        for name, v in optim.v.items():
            entries[f"optim/v/{name}"] = (v, False)
    for name, arr in (meta or {}).items():
        entries[f"meta/{name}"] = (np.asarray(arr, dtype=np.float32), False)
    write_container(path, entries)


@dataclass
class LoadedCheckpoint:
    params: ParamStore
    optim: AdamState | None
    meta: dict


def load_checkpoint(path) -> LoadedCheckpoint:
    raw = read_container(path)
    params = ParamStore()
    m, v, t = {}, {}, None
    meta = {}
    for name in sorted(raw):
        arr, frozen = raw[name]
        if name == "optim/t":
            t = int(arr[0])
        elif name.startswith("optim/m/"):
            m[name[len("optim/m/"):]] = arr
        elif name.startswith("optim/v/"):
            v[name[len("optim/v/"):]] = arr
        elif name.startswith("meta/"):
            meta[name[len("meta/"):]] = arr
        else:
            params.register(name, arr, trainable=not frozen)
    optim = AdamState(m=m, v=v, t=t) if t is not None else None
    return LoadedCheckpoint(params=params, optim=optim, meta=meta)


ENCODER_VARIANT_CODES = {"random5": 0.0, "pretrained_frozen": 1.0}


def meta_from_configs(enc: EncoderConfig, gen: GeneratorConfig) -> dict:
    """Architecture metadata so a checkpoint can rebuild its own model."""
    return {
        "encoder_variant": np.array([ENCODER_VARIANT_CODES[enc.variant]]),
        "channels": np.array(enc.channels, dtype=np.float32),
        "kernel_size": np.array([enc.kernel_size]),
        "encoder_frozen": np.array([1.0 if enc.frozen else 0.0]),
        "fusion_width": np.array([gen.fusion_width]),
    }


def configs_from_meta(meta: dict):
    if "encoder_variant" not in meta:
        raise CheckpointError("checkpoint carries no architecture metadata")
    code = float(meta["encoder_variant"][0])
    variants = {v: k for k, v in ENCODER_VARIANT_CODES.items()}
    if code not in variants:
        raise CheckpointError(f"unknown encoder variant code {code}")
    enc = EncoderConfig(
        variant=variants[code],
        channels=tuple(int(c) for c in meta["channels"]),
        kernel_size=int(meta["kernel_size"][0]),
        frozen=bool(meta["encoder_frozen"][0]),
    )
    gen = GeneratorConfig(fusion_width=int(meta["fusion_width"][0]))
    return enc, gen


GOLDEN_NAMES = ("golden/input", "golden/tap1", "golden/tap2", "golden/tap3",
                "golden/tap4", "golden/tap5")


@dataclass
class GoldenReport:
    deviations: list
    tolerance: float = GOLDEN_TOLERANCE

    @property
    def passed(self) -> bool:
        return all(d <= self.tolerance for d in self.deviations)

    def __str__(self) -> str:
        lines = [
            f"tap{i + 1}: max-abs deviation {d:.3e} "
            f"({'ok' if d <= self.tolerance else 'FAIL'})"
            for i, d in enumerate(self.deviations)
        ]
        verdict = "PASS" if self.passed else "FAIL"
        return "\n".join(lines + [f"golden check: {verdict} (tolerance {self.tolerance:g})"])


def _encoder_from_store(store: ParamStore):
    """Build whichever encoder variant the store's names describe, float64."""
    from .model import PretrainedEncoder, Random5Encoder

    f64 = ParamStore()
    for name, p in store.items():
        if name.startswith("encoder/"):
            f64.register(name, p.data.astype(np.float64), p.trainable)
    if "encoder/conv1_1/kernel" in f64:
        cfg = EncoderConfig(variant="pretrained_frozen")
        return PretrainedEncoder(cfg, f64)
    if "encoder/block1/kernel" in f64:
        channels, k = [], None
        for i in range(1, 6):
            key = f"encoder/block{i}/kernel"
            if key not in f64:
                raise CheckpointError(f"store lacks {key}; cannot infer encoder")
            shape = f64[key].data.shape
            channels.append(shape[0])
            k = shape[2]
        cfg = EncoderConfig(variant="random5", channels=tuple(channels),
                            kernel_size=k, frozen=True)
        rng = np.random.default_rng(0)  # unused: every block attaches
        return Random5Encoder(cfg, f64, rng, np.float64)
    raise CheckpointError("store contains no recognizable encoder entries")


def verify_golden(params: ParamStore, fixture_path) -> GoldenReport:
    """Compare encoder taps on the fixture input against stored activations.

    The forward runs in float64 so the comparison budget is spent on
    genuine weight/architecture disagreement, not on summation-order
    noise between toolchains.
    """
    raw = read_container(fixture_path)
    missing = [n for n in GOLDEN_NAMES if n not in raw]
    if missing:
        raise CheckpointError(
            f"golden fixture {fixture_path} lacks entries: {', '.join(missing)}"
        )
    encoder = _encoder_from_store(params)
    x = raw["golden/input"][0].astype(np.float64)
    if x.ndim == 3:
        x = x[None]
    taps, _ = encoder.forward(x, training=False)
    deviations = []
    for i, tap in enumerate(taps, start=1):
        want = raw[f"golden/tap{i}"][0].astype(np.float64)
        if tap.shape != want.shape:
            raise CheckpointError(
                f"golden/tap{i} dims {want.shape} do not match computed {tap.shape}"
            )
        # round to the container's precision so identical math compares equal
        comp = tap.astype(np.float32).astype(np.float64)
        deviations.append(float(np.max(np.abs(comp - want))))
    return GoldenReport(deviations=deviations)


def make_golden_fixture(params: ParamStore, x: np.ndarray, out_path) -> None:
    """Emit a golden fixture from this engine's own encoder (float64 taps)."""
    if x.ndim == 3:
        x = x[None]
    encoder = _encoder_from_store(params)
    taps, _ = encoder.forward(x.astype(np.float64), training=False)
    entries = {"golden/input": (x.astype(np.float32), True)}
    for i, tap in enumerate(taps, start=1):
        entries[f"golden/tap{i}"] = (tap.astype(np.float32), True)
    write_container(out_path, entries)
