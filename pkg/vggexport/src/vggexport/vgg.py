"""VGG-19 convolution stack: structure, weight sources, tap forward.

Only the layers the segmentation encoder consumes are handled: the
conv/ReLU chain through conv5_2 with 2x2 max pooling between stages.
The classifier head and the tail of stage 5 are out of scope.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

# (stage width, convs per stage); taps are each stage's second conv
STAGES = ((64, 2), (128, 2), (256, 4), (512, 4), (512, 2))

# torchvision vgg19().features module indices of each Conv2d
TORCHVISION_INDEX = {
    "conv1_1": 0, "conv1_2": 2,
    "conv2_1": 5, "conv2_2": 7,
    "conv3_1": 10, "conv3_2": 12, "conv3_3": 14, "conv3_4": 16,
    "conv4_1": 19, "conv4_2": 21, "conv4_3": 23, "conv4_4": 25,
    "conv5_1": 28, "conv5_2": 30,
}


class ExportError(Exception):
    pass


def layer_plan(width_scale: int = 1):
    """Ordered (name, cout, cin) triples for the exported conv chain."""
    if width_scale < 1:
        raise ExportError(f"width scale must be >= 1, got {width_scale}")

    def w(width):
        return width if width_scale == 1 else max(2, width // width_scale)

    plan = []
    cin = 3
    for s, (width, nconv) in enumerate(STAGES, start=1):
        for j in range(1, nconv + 1):
            plan.append((f"conv{s}_{j}", w(width), cin))
            cin = w(width)
    return plan


LAYER_NAMES = tuple(name for name, _, _ in layer_plan())


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def synthetic_weights(seed: int, width_scale: int = 1) -> dict:
    """Deterministic stand-in weights in the published layout."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, cout, cin in layer_plan(width_scale):
        kernel = _he_uniform(rng, (cout, cin, 3, 3), cin * 9)
        bias = np.zeros(cout, dtype=np.float32)
        out[name] = (kernel, bias)
    return out


def _weights_from_state_dict(state: dict) -> dict:
    """Accept torchvision `features.N.weight` keys or `convS_J.weight` keys."""
    out = {}
    missing = []
    for name in LAYER_NAMES:
        idx = TORCHVISION_INDEX[name]
        for keys in ((f"features.{idx}.weight", f"features.{idx}.bias"),
                     (f"{name}.weight", f"{name}.bias")):
            if keys[0] in state and keys[1] in state:
                kernel = np.asarray(state[keys[0]], dtype=np.float32)
                bias = np.asarray(state[keys[1]], dtype=np.float32)
                out[name] = (kernel, bias)
                break
        else:
            missing.append(name)
    if missing:
        raise ExportError(f"source lacks layers: {', '.join(missing)}")
    return out


def load_source(source: str, width_scale: int = 1) -> tuple:
    """Resolve a source id or path to (weights, source id, sha256 hex).

    `synthetic:<seed>` generates deterministic weights; anything else
    is a torch-saved state dict on disk.  Width scaling applies only to
    synthetic weights; a real release always ships full width.
    """
    if source.startswith("synthetic:"):
        try:
            seed = int(source.split(":", 1)[1])
        except ValueError:
            raise ExportError(f"bad synthetic source {source!r}; "
                              "expected synthetic:<integer seed>")
        weights = synthetic_weights(seed, width_scale)
        digest = hashlib.sha256()
        for name in LAYER_NAMES:
            kernel, bias = weights[name]
            digest.update(kernel.tobytes())
            digest.update(bias.tobytes())
        return weights, source, digest.hexdigest()
    if width_scale != 1:
        raise ExportError("width scaling applies only to synthetic sources")
    path = Path(source)
    if not path.is_file():
        raise ExportError(f"source weight file {path} does not exist")
    import torch

    state = torch.load(path, map_location="cpu", weights_only=True)
    if hasattr(state, "state_dict"):
        state = state.state_dict()
    state = {k: v for k, v in state.items()}
    weights = _weights_from_state_dict(state)
    return weights, str(path), hashlib.sha256(path.read_bytes()).hexdigest()


def check_shapes(weights: dict, width_scale: int = 1) -> None:
    for name, cout, cin in layer_plan(width_scale):
        kernel, bias = weights[name]
        if kernel.shape != (cout, cin, 3, 3):
            raise ExportError(
                f"{name}: kernel dims {kernel.shape} do not match the "
                f"published structure {(cout, cin, 3, 3)}"
            )
        if bias.shape != (cout,):
            raise ExportError(
                f"{name}: bias dims {bias.shape} do not match ({cout},)"
            )


def tap_forward(weights: dict, x: np.ndarray) -> list:
    """Run the conv stack in torch at float64; return the five tap arrays.

    x is (1,3,H,W).  Taps are post-ReLU outputs of each stage's second
    conv; pooling halves extents between stages.
    """
    import torch
    import torch.nn.functional as F

    torch.set_num_threads(1)
    h = torch.from_numpy(np.asarray(x, dtype=np.float64))
    taps = []
    i = 0
    for s, (_, nconv) in enumerate(STAGES, start=1):
        if s > 1:
            h = F.max_pool2d(h, kernel_size=2)
        for j in range(1, nconv + 1):
            kernel, bias = weights[LAYER_NAMES[i]]
            i += 1
            h = F.conv2d(h, torch.from_numpy(kernel.astype(np.float64)),
                         torch.from_numpy(bias.astype(np.float64)), padding=1)
            h = F.relu(h)
            if j == 2:
                taps.append(h.numpy())
    return taps
