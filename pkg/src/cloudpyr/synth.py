"""Deterministic synthetic cloud scenes for desk-scale training.

Everything derives from integer-hash lattice value noise, so a seed
fully determines every pixel with no dependence on any RNG library's
stream layout.  Images are 8-bit RGB; masks are {0,255} grayscale with
255 = cloud.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import write_image, write_mask
from .errors import DataError

TERRAIN_MODES = ("flat", "textured", "snowy")


@dataclass
class SynthSpec:
    seed: int = 0
    size: tuple = (64, 64)
    coverage: float = 0.3
    terrain: str = "textured"

    def __post_init__(self):
        h, w = self.size
        if h % 16 or w % 16:
            raise DataError(f"scene extents {h}x{w} must be divisible by 16")
        if not 0.0 <= self.coverage <= 1.0:
            raise DataError(f"coverage {self.coverage} outside [0,1]")
        if self.terrain not in TERRAIN_MODES:
            raise DataError(f"unknown terrain mode {self.terrain!r}")


def _hash_u32(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Avalanche-mix lattice coordinates into uniform uint32 values."""
    h = (ix.astype(np.uint64) * np.uint64(374761393)
         + iy.astype(np.uint64) * np.uint64(668265263)
         + np.uint64(seed & 0xFFFFFFFF) * np.uint64(2246822519)) & np.uint64(0xFFFFFFFF)
    h ^= h >> np.uint64(13)
    h = (h * np.uint64(1274126177)) & np.uint64(0xFFFFFFFF)
    h ^= h >> np.uint64(16)
    return h.astype(np.uint32)


def _lattice(ix, iy, seed):
    return _hash_u32(ix, iy, seed).astype(np.float64) / 4294967296.0


def value_noise(h: int, w: int, cell: int, seed: int) -> np.ndarray:
    """Bilinear lattice noise in [0,1), smoothstep-interpolated."""
    ys = np.arange(h)[:, None] / cell
    xs = np.arange(w)[None, :] / cell
    y0, x0 = np.floor(ys).astype(np.int64), np.floor(xs).astype(np.int64)
    fy, fx = ys - y0, xs - x0
    fy = fy * fy * (3.0 - 2.0 * fy)
    fx = fx * fx * (3.0 - 2.0 * fx)
    v00 = _lattice(x0, y0, seed)
    v01 = _lattice(x0 + 1, y0, seed)
    v10 = _lattice(x0, y0 + 1, seed)
    v11 = _lattice(x0 + 1, y0 + 1, seed)
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def fbm(h: int, w: int, seed: int, octaves: int = 4, base_cell: int = 32) -> np.ndarray:
    """Multi-octave value noise, renormalized to [0,1]."""
    out = np.zeros((h, w))
    amp, total = 1.0, 0.0
    cell = base_cell
    for k in range(octaves):
        out += amp * value_noise(h, w, max(cell, 1), seed + 1013 * k)
        total += amp
        amp *= 0.5
        cell //= 2
    out /= total
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def _terrain(spec: SynthSpec) -> np.ndarray:
    """Ground layer as (H,W,3) reals in [0,255]."""
    h, w = spec.size
    base_seed = spec.seed * 7919 + 11
    if spec.terrain == "flat":
        g = 70.0 + 8.0 * value_noise(h, w, 16, base_seed)
        rgb = np.stack([g * 0.95, g, g * 0.85], axis=-1)
    elif spec.terrain == "textured":
        g = 40.0 + 110.0 * fbm(h, w, base_seed, octaves=5, base_cell=24)
        rgb = np.stack([g * 0.9, g * 0.95, g * 0.8], axis=-1)
    else:  # snowy: bright patches with fine grain, darker ground between
        patches = fbm(h, w, base_seed + 1, octaves=3, base_cell=40)
        snow = patches > 0.55
        ground = 50.0 + 60.0 * fbm(h, w, base_seed + 2, octaves=4, base_cell=20)
        grain = 15.0 * value_noise(h, w, 2, base_seed + 3)
        # snow tops out near 185, below the dimmest cloud blend (~200),
        # so snowy stays the hardest terrain without being inseparable
        g = np.where(snow, 170.0 + grain, ground)
        rgb = np.stack([g, g, np.where(snow, g, g * 0.85)], axis=-1)
    return np.clip(rgb, 0.0, 255.0)


def synth_scene(spec: SynthSpec):
    """Render one scene; returns (image (H,W,3) uint8, mask (H,W) uint8)."""
    h, w = spec.size
    rgb = _terrain(spec)
    field = fbm(h, w, spec.seed * 31337 + 101, octaves=4, base_cell=32)
    if spec.coverage <= 0.0:
        inside = np.zeros((h, w), dtype=bool)
    elif spec.coverage >= 1.0:
        inside = np.ones((h, w), dtype=bool)
    else:
        tau = float(np.quantile(field, 1.0 - spec.coverage))
        inside = field > tau
    mask = np.where(inside, 255, 0).astype(np.uint8)

    if inside.any():
        # opacity ramps from 0.75 at the boundary to 1.0 at the densest core
        span = field.max() - field[inside].min()
        ramp = np.zeros((h, w))
        if span > 0:
            ramp[inside] = (field[inside] - field[inside].min()) / span
        alpha = np.where(inside, 0.75 + 0.25 * ramp, 0.0)[..., None]
        cloud_g = 235.0 + 20.0 * value_noise(h, w, 8, spec.seed * 31337 + 77)
        cloud = np.stack([cloud_g, cloud_g, cloud_g], axis=-1)
        rgb = rgb * (1.0 - alpha) + cloud * alpha

    img = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return img, mask


def write_synth_dataset(root, count: int, base_seed: int = 0,
                        size=(64, 64), coverage: float | None = None) -> list:
    """Write count scene pairs plus a manifest; returns the specs used.

    Terrain modes cycle deterministically; per-scene coverage varies
    around 0.3 unless pinned by the coverage argument.
    """
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    specs = []
    lines = []
    for i in range(count):
        seed = base_seed + i
        cov = coverage if coverage is not None else 0.2 + 0.05 * (i % 5)
        spec = SynthSpec(seed=seed, size=tuple(size), coverage=cov,
                         terrain=TERRAIN_MODES[i % len(TERRAIN_MODES)])
        img, mask = synth_scene(spec)
        stem = f"scene{i:03d}"
        write_image(root / "images" / f"{stem}.png", img)
        write_mask(root / "masks" / f"{stem}.png", mask)
        lines.append(f"{stem} seed={seed} coverage={cov:.3f} terrain={spec.terrain}\n")
        specs.append(spec)
    (root / "manifest.txt").write_text("".join(lines))
    return specs
