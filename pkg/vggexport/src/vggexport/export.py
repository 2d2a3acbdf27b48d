"""Weight export, manifest bookkeeping, and golden-fixture emission."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dpnw import write as write_dpnw
from .vgg import (
    ExportError,
    LAYER_NAMES,
    check_shapes,
    load_source,
    tap_forward,
)

# normalization means in R,G,B order, matching the engine's default
MEANS = (123.68, 116.779, 103.939)

GOLDEN_SIZE = 32


def _hash_u32(c: np.ndarray, y: np.ndarray, x: np.ndarray, seed: int) -> np.ndarray:
    """Avalanche-mix (channel, row, col) into uniform uint32."""
    h = (c.astype(np.uint64) * np.uint64(3266489917)
         + y.astype(np.uint64) * np.uint64(374761393)
         + x.astype(np.uint64) * np.uint64(668265263)
         + np.uint64(seed & 0xFFFFFFFF) * np.uint64(2246822519)) & np.uint64(0xFFFFFFFF)
    h ^= h >> np.uint64(13)
    h = (h * np.uint64(1274126177)) & np.uint64(0xFFFFFFFF)
    h ^= h >> np.uint64(16)
    return h.astype(np.uint32)


def golden_input(seed: int = 0, size: int = GOLDEN_SIZE) -> np.ndarray:
    """Deterministic normalized test image, (1,3,size,size) float32.

    Raw values land on the integer grid [0,256) like 8-bit pixels, then
    the per-channel means come off, so the fixture exercises the same
    dynamic range the encoder sees in production.
    """
    c = np.arange(3)[:, None, None]
    y = np.arange(size)[None, :, None]
    x = np.arange(size)[None, None, :]
    raw = (_hash_u32(c, y, x, seed) % np.uint32(256)).astype(np.float64)
    img = raw - np.asarray(MEANS, dtype=np.float64)[:, None, None]
    return img[None].astype(np.float32)


def layer_mapping() -> dict:
    return {
        name: [f"encoder/{name}/kernel", f"encoder/{name}/bias"]
        for name in LAYER_NAMES
    }


def export_weights(weights: dict, out_path, channel_order: str = "rgb",
                   width_scale: int = 1) -> None:
    """Write the conv chain to a DPNW container, every entry frozen.

    channel_order names how the SOURCE stores its input channels; a
    reversed source gets conv1_1 flipped along Cin so the stored file
    is always R,G,B.
    """
    if channel_order not in ("rgb", "bgr"):
        raise ExportError(f"channel order must be rgb or bgr, got {channel_order!r}")
    check_shapes(weights, width_scale)
    entries = {}
    for name in LAYER_NAMES:
        kernel, bias = weights[name]
        kernel = np.ascontiguousarray(kernel, dtype=np.float32)
        if name == "conv1_1" and channel_order == "bgr":
            kernel = np.ascontiguousarray(kernel[:, ::-1])
        entries[f"encoder/{name}/kernel"] = (kernel, True)
        entries[f"encoder/{name}/bias"] = (np.ascontiguousarray(bias, dtype=np.float32), True)
    write_dpnw(out_path, entries)


def write_manifest(path, source_id: str, sha256: str, channel_order: str,
                   width_scale: int) -> None:
    """Record the provenance of an export; refuse to re-pin a new source.

    An existing manifest with a different checksum means the caller is
    pointing at a different weight release than the one every recorded
    number was measured against, so that is an error, not an update.
    """
    path = Path(path)
    if path.exists():
        prior = json.loads(path.read_text())
        if prior.get("sha256") != sha256:
            raise ExportError(
                f"manifest {path} pins sha256 {prior.get('sha256')}, but this "
                f"source hashes to {sha256}; refusing to re-pin silently"
            )
    doc = {
        "source": source_id,
        "sha256": sha256,
        "layers": layer_mapping(),
        "channel_order": "rgb",
        "source_channel_order": channel_order,
        "means_rgb": list(MEANS),
        "width_scale": width_scale,
    }
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def emit_golden(weights: dict, out_path, seed: int = 0) -> None:
    """Run the taps on the fixed input and store input + activations."""
    x = golden_input(seed)
    taps = tap_forward(weights, x.astype(np.float64))
    entries = {"golden/input": (x, True)}
    for i, tap in enumerate(taps, start=1):
        entries[f"golden/tap{i}"] = (tap.astype(np.float32), True)
    write_dpnw(out_path, entries)


def run_export(source: str, out_path, golden_path=None, manifest_path=None,
               channel_order: str = "rgb", width_scale: int = 1,
               golden_seed: int = 0) -> dict:
    """Full pipeline: load, export, pin, optionally emit the fixture."""
    weights, source_id, sha = load_source(source, width_scale)
    export_weights(weights, out_path, channel_order, width_scale)
    if manifest_path is not None:
        write_manifest(manifest_path, source_id, sha, channel_order, width_scale)
    if golden_path is not None:
        if channel_order == "bgr":
            kernel, bias = weights["conv1_1"]
            weights = dict(weights)
            weights["conv1_1"] = (np.ascontiguousarray(kernel[:, ::-1]), bias)
        emit_golden(weights, golden_path, golden_seed)
    return {"source": source_id, "sha256": sha}
