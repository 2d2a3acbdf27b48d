"""Image/mask I/O, normalization, dataset indexing, and patch batching.

Dataset layout: ``<root>/images/<stem>.png`` (8-bit RGB) paired with
``<root>/masks/<stem>.png`` (8-bit grayscale, values exactly 0 or 255,
255 = cloud).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DataError

# channel means of the pretrained-encoder convention, R,G,B order
DEFAULT_MEANS = (123.68, 116.779, 103.939)


@dataclass
class NormalizationSpec:
    """Per-channel mean subtraction and a global scale, R,G,B order."""

    mean: tuple = DEFAULT_MEANS
    scale: float = 1.0


def load_image(path) -> np.ndarray:
    """Decode an 8-bit RGB PNG to a (1,3,H,W) float32 tensor in [0,255]."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    if img.mode != "RGB":
        raise DataError(
            f"image {path} has mode {img.mode}, expected 8-bit RGB"
        )
    arr = np.asarray(img, dtype=np.float32)  # (H,W,3)
    return arr.transpose(2, 0, 1)[None]


def load_mask(path) -> np.ndarray:
    """Decode an 8-bit grayscale PNG to a (H,W) uint8 array."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"cannot read mask {path}: {e}") from e
    if img.mode != "L":
        raise DataError(f"mask {path} has mode {img.mode}, expected 8-bit grayscale")
    return np.asarray(img, dtype=np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    """Write a (H,W) uint8 {0,255} array as a grayscale PNG."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.dtype != np.uint8:
        raise DataError(f"mask must be a 2-D uint8 array, got {mask.dtype} ndim={mask.ndim}")
    Image.fromarray(mask, mode="L").save(Path(path), format="PNG")


def write_image(path, img: np.ndarray) -> None:
    """Write a (H,W,3) uint8 array as an RGB PNG."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DataError(f"image must be (H,W,3) uint8, got {img.dtype} {img.shape}")
    Image.fromarray(img, mode="RGB").save(Path(path), format="PNG")


def normalize(img: np.ndarray, spec: NormalizationSpec | None = None) -> np.ndarray:
    """Center each channel on its configured mean, then scale."""
    spec = spec or NormalizationSpec()
    mean = np.asarray(spec.mean, dtype=img.dtype).reshape(1, 3, 1, 1)
    return (img - mean) * img.dtype.type(spec.scale)


def encode_mask(mask: np.ndarray) -> np.ndarray:
    """Turn a (H,W) {0,255} mask into a (1,2,H,W) one-hot float32 target.

    Channel 0 is surface, channel 1 is cloud.  Any other pixel value is
    a labeling error and is rejected rather than reinterpreted.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got ndim={mask.ndim}")
    bad = ~np.isin(mask, (0, 255))
    if bad.any():
        vals = np.unique(mask[bad])[:8]
        raise DataError(
            f"mask contains values other than 0/255: {vals.tolist()}"
        )
    out = np.zeros((1, 2) + mask.shape, dtype=np.float32)
    cloud = mask == 255
    out[0, 1][cloud] = 1.0
    out[0, 0][~cloud] = 1.0
    return out


@dataclass
class DatasetIndex:
    root: Path
    pairs: list  # of (image path, mask path)
    split: str = "train"

    def __post_init__(self):
        self._cache: dict = {}

    def __len__(self):
        return len(self.pairs)

    def load_pair(self, i: int):
        """Decoded (image tensor, mask array) with per-index caching."""
        if i not in self._cache:
            img = load_image(self.pairs[i][0])
            mask = load_mask(self.pairs[i][1])
            if img.shape[2:] != mask.shape:
                raise DataError(
                    f"extent mismatch for {self.pairs[i][0].name}: "
                    f"image {img.shape[2:]} vs mask {mask.shape}"
                )
            self._cache[i] = (img, mask)
        return self._cache[i]


def scan_dataset(root, split: str = "train") -> DatasetIndex:
    """Index <root>/images/*.png against <root>/masks/ by matching stem."""
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir():
        raise DataError(f"dataset root {root} has no images/ directory")
    pairs = []
    for img_path in sorted(img_dir.glob("*.png")):
        mask_path = mask_dir / img_path.name
        if not mask_path.is_file():
            raise DataError(f"image {img_path.name} has no mask in {mask_dir}")
        pairs.append((img_path, mask_path))
    if not pairs:
        raise DataError(f"no image/mask pairs under {root}")
    return DatasetIndex(root=root, pairs=pairs, split=split)


@dataclass
class SampleBatch:
    images: np.ndarray  # (N,3,h,w) normalized float32
    targets: np.ndarray  # (N,2,h,w) one-hot float32
    provenance: list  # of (pair index, (row offset, col offset))


def sample_batch(index: DatasetIndex, n: int, patch: int,
                 rng: np.random.Generator,
                 norm: NormalizationSpec | None = None) -> SampleBatch:
    """Draw n uniform random patch crops with replacement. No augmentation."""
    images, targets, provenance = [], [], []
    for _ in range(n):
        i = int(rng.integers(0, len(index)))
        img, mask = index.load_pair(i)
        h, w = img.shape[2:]
        if h < patch or w < patch:
            raise DataError(
                f"scene {index.pairs[i][0].name} extents {h}x{w} smaller "
                f"than patch {patch}"
            )
        r = int(rng.integers(0, h - patch + 1))
        c = int(rng.integers(0, w - patch + 1))
        images.append(normalize(img[:, :, r : r + patch, c : c + patch], norm))
        targets.append(encode_mask(mask[r : r + patch, c : c + patch]))
        provenance.append((i, (r, c)))
    return SampleBatch(
        images=np.concatenate(images, axis=0),
        targets=np.concatenate(targets, axis=0),
        provenance=provenance,
    )
