"""Whole-scene prediction, exact tiled inference, and evaluation metrics.

Tiling is bit-exact against the whole-image path because of two facts:

* The receptive field is computed symbolically: for each pyramid level,
  the op chain input -> logits is walked backwards with exact integer
  interval arithmetic, giving the true dependency radius (`reach`).
* Tile read windows stay on the 16-pixel downsampling grid.  A halo
  that is a multiple of 16 keeps every window's stride phase identical
  to the whole image's, so the same floats are computed in both paths.
  The required halo is therefore reach rounded up to a multiple of 16.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

GRID = 16  # total downsampling factor; all windows must stay on this grid


def _interval_through(ops, lo: int, hi: int) -> tuple[int, int]:
    """Map an output index interval to the input interval it depends on."""
    for op in reversed(ops):
        kind = op[0]
        if kind == "conv":
            _, k, s = op
            r = (k - 1) // 2
            lo, hi = s * lo - r, s * hi + r
        elif kind == "pool2":
            lo, hi = 2 * lo, 2 * hi + 1
        elif kind == "up2":
            lo, hi = lo // 2, hi // 2
        else:
            raise ValueError(f"unknown op {op!r}")
    return lo, hi


def receptive_reach(model) -> int:
    """Exact one-sided input radius of one output pixel, over all levels."""
    reach = 0
    for path in model.level_paths():
        for o in range(GRID):  # every stride phase of the output grid
            lo, hi = _interval_through(path, o, o)
            reach = max(reach, o - lo, hi - o)
    return reach


def required_halo(model) -> int:
    """Smallest grid-aligned halo that covers the receptive field."""
    reach = receptive_reach(model)
    return ((reach + GRID - 1) // GRID) * GRID


def _reflect_pad(x: np.ndarray, top: int, bottom: int,
                 left: int, right: int) -> np.ndarray:
    """Reflect-pad spatial axes, iterating when a pad exceeds the extent.

    numpy caps a single reflection at extent-1; applying it in chunks
    keeps halos wider than the scene well defined (mirror of mirror).
    Both inference paths share this helper, which is what makes their
    padded canvases, and hence their outputs, identical.
    """
    while top or bottom or left or right:
        ch = min(x.shape[2] - 1, max(top, bottom))
        cw = min(x.shape[3] - 1, max(left, right))
        step = ((0, 0), (0, 0),
                (min(top, ch), min(bottom, ch)),
                (min(left, cw), min(right, cw)))
        x = np.pad(x, step, mode="reflect")
        top -= step[2][0]
        bottom -= step[2][1]
        left -= step[3][0]
        right -= step[3][1]
    return x


def _pad_to_grid(x: np.ndarray) -> tuple[np.ndarray, int, int]:
    """Reflect-pad right/bottom so extents are multiples of the grid."""
    h, w = x.shape[2], x.shape[3]
    if h < 2 or w < 2:
        raise ShapeError(f"scene extents {h}x{w} are too small to reflect-pad")
    return _reflect_pad(x, 0, (-h) % GRID, 0, (-w) % GRID), h, w


def _probs(model, x: np.ndarray) -> np.ndarray:
    """Forward on arbitrary extents, padding to the grid internally."""
    xp, h, w = _pad_to_grid(x)
    p = model.forward(xp, training=False)
    return p[:, :, :h, :w]


def decode_mask(p: np.ndarray) -> np.ndarray:
    """Per-pixel argmax of a (1,2,H,W) probability field; tie -> surface."""
    return np.where(p[0, 1] > p[0, 0], 255, 0).astype(np.uint8)


def predict_mask(model, image: np.ndarray) -> np.ndarray:
    """Whole-image binary mask for a normalized (1,3,H,W) tensor.

    The scene is reflect-padded by the model's required halo before the
    forward pass so border pixels see the same kind of context as
    interior ones (and as the tiled path).
    """
    if image.ndim != 4 or image.shape[0] != 1:
        raise ShapeError(f"predict_mask expects a (1,3,H,W) tensor, got {image.shape}")
    halo = required_halo(model)
    canvas, h, w = _pad_to_grid(image)
    padded = _reflect_pad(canvas, halo, halo, halo, halo)
    p = model.forward(padded, training=False)
    ch, cw = canvas.shape[2], canvas.shape[3]
    p = p[:, :, halo : halo + ch, halo : halo + cw]
    return decode_mask(p)[:h, :w]


@dataclass
class TilePlan:
    """Disjoint core rectangles and the padded read window of each.

    Both rectangles are (r0, r1, c0, c1) in grid-padded canvas
    coordinates; read windows extend past the canvas by the halo and
    are satisfied there by reflection.  Cores cover the canvas exactly
    once.
    """

    tile: int
    halo: int
    required: int
    tiles: list  # of (core, read) rectangle pairs
    unsafe: bool = False  # built with validate=False; equality not guaranteed

    @property
    def cores(self) -> list:
        return [core for core, _ in self.tiles]


def make_tile_plan(model, scene_hw: tuple, tile: int,
                   halo: int | None = None, validate: bool = True) -> TilePlan:
    """Plan tiled inference over a scene of (H, W) pixels.

    validate=False skips the safety checks; the resulting plan can
    produce wrong masks and exists for demonstrating exactly that.
    """
    req = required_halo(model)
    halo = req if halo is None else halo
    if validate:
        if tile < GRID or tile % GRID:
            raise ConfigError(f"tile extent {tile} must be a positive multiple of {GRID}")
        if halo < req:
            raise ConfigError(
                f"halo {halo} is smaller than the model's required "
                f"receptive-field radius {req}"
            )
        if halo % GRID:
            raise ConfigError(
                f"halo {halo} must be a multiple of {GRID} to keep tile "
                f"windows on the downsampling grid (required radius {req})"
            )
    h, w = scene_hw
    ch, cw = h + ((-h) % GRID), w + ((-w) % GRID)
    tiles = []
    for r0 in range(0, ch, tile):
        for c0 in range(0, cw, tile):
            core = (r0, min(r0 + tile, ch), c0, min(c0 + tile, cw))
            read = (core[0] - halo, core[1] + halo,
                    core[2] - halo, core[3] + halo)
            tiles.append((core, read))
    return TilePlan(tile=tile, halo=halo, required=req, tiles=tiles,
                    unsafe=not validate)


def predict_tiled(model, image: np.ndarray, plan: TilePlan) -> np.ndarray:
    """Assemble the scene mask from independent tile predictions.

    Equals predict_mask exactly when the plan's halo is grid-aligned
    and at least the required radius (which validated plans enforce).
    """
    if image.ndim != 4 or image.shape[0] != 1:
        raise ShapeError(f"predict_tiled expects a (1,3,H,W) tensor, got {image.shape}")
    if not plan.unsafe and (plan.halo < plan.required or plan.halo % GRID):
        raise ConfigError(
            f"tile halo {plan.halo} is too small for this model; the "
            f"required receptive-field radius is {plan.required}"
        )
    canvas, h, w = _pad_to_grid(image)
    ch, cw = canvas.shape[2], canvas.shape[3]
    padded = _reflect_pad(canvas, plan.halo, plan.halo, plan.halo, plan.halo)
    out = np.zeros((ch, cw), dtype=np.uint8)
    for (r0, r1, c0, c1), (rr0, rr1, cc0, cc1) in plan.tiles:
        # read rect is in canvas coords; +halo shifts into padded coords
        window = padded[:, :, rr0 + plan.halo : rr1 + plan.halo,
                        cc0 + plan.halo : cc1 + plan.halo]
        p = _probs(model, window)
        core = p[:, :, plan.halo : plan.halo + (r1 - r0),
                 plan.halo : plan.halo + (c1 - c0)]
        out[r0:r1, c0:c1] = decode_mask(core)
    return out[:h, :w]


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Pixel counts with cloud (255) as the positive class."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask extents differ: {pred.shape} vs {gt.shape}")
    p = pred == 255
    g = gt == 255
    return ConfusionCounts(
        tp=int((p & g).sum()),
        fp=int((p & ~g).sum()),
        tn=int((~p & ~g).sum()),
        fn=int((~p & g).sum()),
    )


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("accuracy of an empty count set is undefined")
    return (c.tp + c.tn) / c.total


def precision(c: ConfusionCounts):
    """tp/(tp+fp), or None when nothing was predicted positive."""
    denom = c.tp + c.fp
    if denom == 0:
        return None
    return c.tp / denom


def measure_latency(model, scene_hw: tuple, reps: int = 3,
                    tile: int = 64, seed: int = 0):
    """Median wall time of tiled inference on an in-memory random scene.

    Returns (stats dict, mask) so callers can confirm repetitions agree
    bitwise.  Disk I/O is excluded by construction.
    """
    if reps < 3:
        raise ConfigError(f"latency needs at least 3 repetitions, got {reps}")
    rng = np.random.default_rng(seed)
    image = rng.uniform(-120.0, 130.0,
                        size=(1, 3) + tuple(scene_hw)).astype(np.float32)
    plan = make_tile_plan(model, scene_hw, tile=tile)
    times, masks = [], []
    for _ in range(reps):
        t0 = time.perf_counter()
        masks.append(predict_tiled(model, image, plan))
        times.append(time.perf_counter() - t0)
    for m in masks[1:]:
        if not np.array_equal(m, masks[0]):
            raise AssertionError("tiled inference was not deterministic across reps")
    stats = {
        "median_s": float(np.median(times)),
        "min_s": float(min(times)),
        "max_s": float(max(times)),
        "reps": reps,
    }
    return stats, masks[0]
