"""Encoder-generator network producing two-channel cloud masks.

Two encoder variants share one generator:

* random5: five trainable conv+BN+ReLU blocks.  Block i is applied
  twice to its input with shared weights: once at stride 1 to produce
  the pyramid tap, once at stride 2 to produce the next level's input.
* pretrained_frozen: the published 19-layer conv stack loaded from a
  checkpoint, all entries frozen, taps taken at the second conv of each
  stage, 2x2 max pooling between stages.

The generator projects every tap to a common width with 1x1 conv
blocks, then walks from the coarsest level upward: upsample 2x, add
the projected skip, fuse with a 3x3 conv block.  A final 1x1 conv
emits per-pixel logits for the two classes (surface, cloud).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import CheckpointError, ShapeError
from .kernels import BatchNormState, ConvSpec
from .params import ParamStore

LOG_CLAMP = 1e-12

# conv counts per stage of the published encoder, up to the fifth tap
VGG_STAGES = ((64, 2), (128, 2), (256, 4), (512, 4), (512, 2))
VGG_TAP_LAYERS = ("conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2")


@dataclass
class EncoderConfig:
    variant: str = "random5"
    channels: tuple = (8, 16, 32, 64, 64)
    kernel_size: int = 3
    frozen: bool = False  # forced True for pretrained_frozen

    def __post_init__(self):
        if self.variant not in ("random5", "pretrained_frozen"):
            raise ValueError(f"unknown encoder variant {self.variant!r}")
        if self.variant == "pretrained_frozen":
            self.frozen = True
        if len(self.channels) != 5 or any(c < 1 for c in self.channels):
            raise ValueError("channel plan must be 5 positive integers")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel size must be odd and positive")


@dataclass
class GeneratorConfig:
    fusion_width: int = 32
    class_count: int = 2

    def __post_init__(self):
        if self.fusion_width < self.class_count:
            raise ValueError("fusion width must be at least the class count")


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ConvBNBlock:
    """conv -> batchnorm -> ReLU with parameters held in a ParamStore.

    Frozen blocks always evaluate batch norm with running statistics so
    their stored state never changes during training.
    """

    def __init__(self, store: ParamStore, prefix: str, cin: int, cout: int,
                 k: int, rng, dtype, trainable: bool = True):
        self.store = store
        self.prefix = prefix
        self.k = k
        pad = (k - 1) // 2
        self.padding = pad
        if f"{prefix}/kernel" in store:
            # attach to an already-loaded store (checkpoint resume)
            have = store[f"{prefix}/kernel"].data.shape
            if have != (cout, cin, k, k):
                raise ShapeError(
                    f"{prefix}/kernel dims {have} do not match the configured "
                    f"{(cout, cin, k, k)}"
                )
            self.trainable = trainable and store[f"{prefix}/kernel"].trainable
        else:
            self.trainable = trainable
            store.register(f"{prefix}/kernel",
                           he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype),
                           trainable)
            store.register(f"{prefix}/bias", np.zeros(cout, dtype=dtype), trainable)
            store.register(f"{prefix}/bn_gamma", np.ones(cout, dtype=dtype), trainable)
            store.register(f"{prefix}/bn_beta", np.zeros(cout, dtype=dtype), trainable)
            store.register(f"{prefix}/bn_mean", np.zeros(cout, dtype=dtype), False)
            store.register(f"{prefix}/bn_var", np.ones(cout, dtype=dtype), False)

    def _spec(self, stride: int) -> ConvSpec:
        return ConvSpec(
            kernel=self.store[f"{self.prefix}/kernel"].data,
            bias=self.store[f"{self.prefix}/bias"].data,
            stride=stride,
            padding=self.padding,
        )

    def _bn(self, training: bool) -> BatchNormState:
        return BatchNormState(
            gamma=self.store[f"{self.prefix}/bn_gamma"].data,
            beta=self.store[f"{self.prefix}/bn_beta"].data,
            running_mean=self.store[f"{self.prefix}/bn_mean"].data,
            running_var=self.store[f"{self.prefix}/bn_var"].data,
            mode="training" if (training and self.trainable) else "inference",
        )

    def forward(self, x: np.ndarray, training: bool, stride: int = 1) -> np.ndarray:
        z = kernels.conv2d(x, self._spec(stride))
        st = self._bn(training)
        h = kernels.batchnorm(z, st)
        if st.mode == "training":
            # EMA state lives in the store; write the updated vectors back
            self.store[f"{self.prefix}/bn_mean"].data[...] = st.running_mean
            self.store[f"{self.prefix}/bn_var"].data[...] = st.running_var
        return kernels.relu(h)

    def backward(self, x: np.ndarray, training: bool, stride: int,
                 upstream: np.ndarray) -> np.ndarray:
        """Recompute the block from x, accumulate param grads, return dL/dx."""
        z = kernels.conv2d(x, self._spec(stride))
        st = self._bn(training)
        st_eval = BatchNormState(gamma=st.gamma, beta=st.beta,
                                 running_mean=st.running_mean.copy(),
                                 running_var=st.running_var.copy(),
                                 mode=st.mode)
        h = kernels.batchnorm(z, st_eval)  # copy shields the stored EMA
        g_h = kernels.relu_backward(h, upstream)
        g_z, g_gamma, g_beta = kernels.batchnorm_backward(z, st, g_h)
        g_x, g_k, g_b = kernels.conv2d_backward(x, self._spec(stride), g_z)
        if self.trainable:
            self.store.add_to_grad(f"{self.prefix}/kernel", g_k)
            self.store.add_to_grad(f"{self.prefix}/bias", g_b)
            self.store.add_to_grad(f"{self.prefix}/bn_gamma", g_gamma)
            self.store.add_to_grad(f"{self.prefix}/bn_beta", g_beta)
        return g_x


class PlainConv:
    """conv -> ReLU over store-held weights (the published encoder's unit)."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix
        k = store[f"{prefix}/kernel"].data
        self.padding = (k.shape[2] - 1) // 2

    def forward(self, x: np.ndarray) -> np.ndarray:
        spec = ConvSpec(
            kernel=self.store[f"{self.prefix}/kernel"].data,
            bias=self.store[f"{self.prefix}/bias"].data,
            padding=self.padding,
        )
        return kernels.relu(kernels.conv2d(x, spec))


class Random5Encoder:
    def __init__(self, config: EncoderConfig, store: ParamStore, rng, dtype):
        self.config = config
        cin = 3
        self.blocks = []
        for i, cout in enumerate(config.channels, start=1):
            self.blocks.append(
                ConvBNBlock(store, f"encoder/block{i}", cin, cout,
                            config.kernel_size, rng, dtype,
                            trainable=not config.frozen)
            )
            cin = cout

    def forward(self, x: np.ndarray, training: bool):
        _check_extents(x)
        taps, inputs = [], [x]
        for i, blk in enumerate(self.blocks):
            taps.append(blk.forward(inputs[-1], training, stride=1))
            if i < 4:
                inputs.append(blk.forward(inputs[-1], training, stride=2))
        return taps, inputs

    def backward(self, inputs, training: bool, tap_grads) -> None:
        g_next = None  # gradient flowing into inputs[i+1]
        for i in range(4, -1, -1):
            g = self.blocks[i].backward(inputs[i], training, 1, tap_grads[i])
            if g_next is not None:
                g = g + self.blocks[i].backward(inputs[i], training, 2, g_next)
            g_next = g

    def tap_paths(self):
        """Op chains input -> tap_i for the receptive-field walk."""
        k = self.config.kernel_size
        paths = []
        for i in range(5):
            ops = [("conv", k, 2)] * i + [("conv", k, 1)]
            paths.append(ops)
        return paths


class PretrainedEncoder:
    """Published conv stack, loaded frozen from a checkpoint."""

    def __init__(self, config: EncoderConfig, store: ParamStore):
        self.config = config
        self.stage_layers = []
        missing = []
        for s, (width, nconv) in enumerate(VGG_STAGES, start=1):
            layers = []
            for j in range(1, nconv + 1):
                name = f"encoder/conv{s}_{j}"
                for leaf in ("kernel", "bias"):
                    if f"{name}/{leaf}" not in store:
                        missing.append(f"{name}/{leaf}")
                layers.append(name)
            self.stage_layers.append(layers)
        if missing:
            raise CheckpointError(
                "pretrained encoder tensors absent from checkpoint: "
                + ", ".join(missing)
            )
        self.convs = {n: PlainConv(store, n) for st in self.stage_layers for n in st}
        self.channels = tuple(
            store[f"{st[-1]}/kernel"].data.shape[0] for st in self.stage_layers
        )

    def forward(self, x: np.ndarray, training: bool):
        _check_extents(x)
        taps = []
        h = x
        for s, layers in enumerate(self.stage_layers):
            if s > 0:
                h = kernels.maxpool2(h)
            for j, name in enumerate(layers):
                h = self.convs[name].forward(h)
                if j == 1:  # the stage's second conv is the tap
                    taps.append(h)
        return taps, None

    def backward(self, inputs, training: bool, tap_grads) -> None:
        return  # every entry frozen; nothing upstream needs dL/dx

    def tap_paths(self):
        paths = []
        prefix = []
        for s, (_, nconv) in enumerate(VGG_STAGES):
            if s > 0:
                prefix = prefix + [("pool2",)]
            stage_to_tap = prefix + [("conv", 3, 1)] * 2
            paths.append(stage_to_tap)
            prefix = prefix + [("conv", 3, 1)] * nconv
        return paths


class Generator:
    def __init__(self, config: GeneratorConfig, tap_channels, store: ParamStore,
                 rng, dtype):
        self.config = config
        cg = config.fusion_width
        self.proj = [
            ConvBNBlock(store, f"generator/proj{i}", c, cg, 1, rng, dtype)
            for i, c in enumerate(tap_channels, start=1)
        ]
        self.fuse = {
            i: ConvBNBlock(store, f"generator/fuse{i}", cg, cg, 3, rng, dtype)
            for i in (4, 3, 2, 1)
        }
        self.store = store
        if "generator/head/kernel" not in store:
            store.register("generator/head/kernel",
                           he_uniform(rng, (config.class_count, cg, 1, 1), cg, dtype))
            store.register("generator/head/bias",
                           np.zeros(config.class_count, dtype=dtype))

    def _head_spec(self) -> ConvSpec:
        return ConvSpec(kernel=self.store["generator/head/kernel"].data,
                        bias=self.store["generator/head/bias"].data)

    def forward(self, taps, training: bool):
        if len(taps) != 5:
            raise ShapeError(f"generator expects 5 pyramid levels, got {len(taps)}")
        g = {5: self.proj[4].forward(taps[4], training)}
        fuse_in = {}
        for i in (4, 3, 2, 1):
            skip = self.proj[i - 1].forward(taps[i - 1], training)
            u = kernels.add(kernels.upsample2_nearest(g[i + 1]), skip)
            fuse_in[i] = u
            g[i] = self.fuse[i].forward(u, training)
        logits = kernels.conv2d(g[1], self._head_spec())
        return logits, {"g": g, "fuse_in": fuse_in}

    def backward(self, taps, ctx, training: bool, g_logits):
        g, fuse_in = ctx["g"], ctx["fuse_in"]
        g_g1, g_hk, g_hb = kernels.conv2d_backward(g[1], self._head_spec(), g_logits)
        self.store.add_to_grad("generator/head/kernel", g_hk)
        self.store.add_to_grad("generator/head/bias", g_hb)
        tap_grads = [None] * 5
        g_level = {1: g_g1}
        for i in (1, 2, 3, 4):
            g_u = self.fuse[i].backward(fuse_in[i], training, 1, g_level[i])
            tap_grads[i - 1] = self.proj[i - 1].backward(taps[i - 1], training, 1, g_u)
            g_level[i + 1] = kernels.upsample2_backward(g_u)
        tap_grads[4] = self.proj[4].backward(taps[4], training, 1, g_level[5])
        return tap_grads

    def gen_paths(self):
        """Op chains tap_i -> logits for the receptive-field walk.

        Level i enters through its projection, then rides the fusion
        ladder fuse_min(i,4) .. fuse_1 with an upsample before every
        fuse stage it did not start at.
        """
        paths = []
        for i in range(1, 6):
            ops = [("conv", 1, 1)]  # proj_i
            for lvl in range(min(i, 4), 0, -1):
                if lvl < i:
                    ops.append(("up2",))
                ops.append(("conv", 3, 1))  # fuse_lvl
            ops.append(("conv", 1, 1))  # head
            paths.append(ops)
        return paths


def _check_extents(x: np.ndarray) -> None:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"encoder expects (N,3,H,W), got {x.shape}")
    if x.shape[2] % 16 or x.shape[3] % 16:
        raise ShapeError(
            f"encoder extents {x.shape[2]}x{x.shape[3]} not divisible by 16; "
            "reflect-pad the input upstream"
        )


class DPNModel:
    """End-to-end network: encoder taps fused by the generator into logits."""

    def __init__(self, enc_config: EncoderConfig, gen_config: GeneratorConfig,
                 store: ParamStore | None = None, seed: int = 0,
                 dtype=np.float32):
        self.enc_config = enc_config
        self.gen_config = gen_config
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(seed)
        if enc_config.variant == "random5":
            self.encoder = Random5Encoder(enc_config, self.store, rng, dtype)
            tap_channels = enc_config.channels
        else:
            self.encoder = PretrainedEncoder(enc_config, self.store)
            tap_channels = self.encoder.channels
        self.tap_channels = tuple(tap_channels)
        self.generator = Generator(gen_config, tap_channels, self.store, rng, dtype)
        self._ctx = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        taps, enc_inputs = self.encoder.forward(x, training)
        logits, gen_ctx = self.generator.forward(taps, training)
        p = kernels.softmax_channels(logits)
        if training:
            self._ctx = {"x": x, "taps": taps, "enc_inputs": enc_inputs,
                         "gen": gen_ctx, "p": p}
        return p

    def backward(self, y: np.ndarray) -> None:
        """Fill gradient slots from the stored training-mode forward."""
        if self._ctx is None:
            raise RuntimeError("backward called before a training-mode forward")
        ctx = self._ctx
        p = ctx["p"]
        if y.shape != p.shape:
            raise ShapeError(f"target dims {y.shape} != prediction dims {p.shape}")
        n, _, h, w = p.shape
        g_logits = (p - y) / (n * h * w)
        tap_grads = self.generator.backward(ctx["taps"], ctx["gen"], True, g_logits)
        self.encoder.backward(ctx["enc_inputs"], True, tap_grads)
        self.store.grads_ready = True
        self._ctx = None

    def level_paths(self):
        """Five op chains (input -> logits), one per pyramid level."""
        tp = self.encoder.tap_paths()
        gp = self.generator.gen_paths()
        return [t + g for t, g in zip(tp, gp)]


def validate_one_hot(y: np.ndarray) -> None:
    if y.ndim != 4 or y.shape[1] != 2:
        raise ShapeError(f"target must be (N,2,H,W), got {y.shape}")
    vals = np.unique(y)
    if not np.isin(vals, (0.0, 1.0)).all():
        raise ShapeError("target values must be exactly 0 or 1")
    if not (y.sum(axis=1) == 1.0).all():
        raise ShapeError("target must be one-hot per pixel")


def loss_eval(p: np.ndarray, y: np.ndarray) -> float:
    """Cross-entropy averaged over batch and pixels, log clamped at 1e-12."""
    validate_one_hot(y)
    if p.shape != y.shape:
        raise ShapeError(f"prediction dims {p.shape} != target dims {y.shape}")
    n, _, h, w = p.shape
    q = np.clip(p, LOG_CLAMP, 1.0 - LOG_CLAMP)
    return float(-(y * np.log(q)).sum() / (n * h * w))


def build_model(enc_config: EncoderConfig, gen_config: GeneratorConfig,
                store: ParamStore | None = None, seed: int = 0,
                dtype=np.float32) -> DPNModel:
    return DPNModel(enc_config, gen_config, store=store, seed=seed, dtype=dtype)
