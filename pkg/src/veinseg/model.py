"""Segmentation network assembly: encoder/decoder blocks, the parallel
atrous+separable bridge, the plain-UNet baseline, and parameter counting."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Tape, add
from .errors import ConfigError, ShapeError
from .layers import (BnState, Conv2dSpec, batchnorm, concat_channels, conv2d,
                     maxpool2, relu, same_padding, sigmoid, upconv2x2,
                     upsample_nearest2)
from .rng import Rng
from .tensor import F32, Tensor4


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "opto"
    in_channels: int = 1
    levels: int = 4
    channels: tuple[int, ...] = (64, 128, 256, 512)
    # 1x1 channel compression after each decoder concat, deepest level first;
    # 0 disables compression at that level. The default is calibrated so the
    # opto variant totals 8,540,419 parameters (see README).
    decoder_compress: tuple[int, ...] = (256, 0, 64, 32)
    image_h: int = 128
    image_w: int = 64
    bridge_atrous_kernel: int = 2
    bridge_dilation: int = 2
    bridge_separable_kernel: int = 3

    def validate(self) -> None:
        if self.variant not in ("opto", "baseline"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if len(self.channels) != self.levels:
            raise ConfigError(
                f"channels list has {len(self.channels)} entries for {self.levels} levels")
        if any(c < 1 for c in self.channels) or self.in_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.variant == "opto" and len(self.decoder_compress) != self.levels:
            raise ConfigError("decoder_compress must have one entry per level")
        step = 1 << self.levels
        if self.image_h % step or self.image_w % step:
            raise ConfigError(
                f"image extents {self.image_h}x{self.image_w} must be divisible by {step}")
        if any(c % 2 for c in self.channels):
            raise ConfigError("encoder channel widths must be even")

    def canonical(self) -> str:
        return (f"variant={self.variant};in={self.in_channels};levels={self.levels};"
                f"channels={','.join(map(str, self.channels))};"
                f"compress={','.join(map(str, self.decoder_compress))};"
                f"h={self.image_h};w={self.image_w};"
                f"atrous_k={self.bridge_atrous_kernel};d={self.bridge_dilation};"
                f"sep_k={self.bridge_separable_kernel}")

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical().encode("utf-8")).digest()


class _Registrar:
    """Creates parameter tensors in a fixed order from one RNG stream."""

    def __init__(self, rng: Rng | None, dtype, init: str):
        if init not in ("he", "zeros"):
            raise ConfigError(f"unknown init {init!r}")
        self.rng = rng
        self.dtype = dtype
        self.init = init
        self.params: dict[str, Tensor4] = {}
        self.bn_states: dict[str, BnState] = {}

    def _add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.params[name] = Tensor4(value)

    def conv_weight(self, name: str, dims: tuple[int, int, int, int], fan_in: int) -> None:
        count = int(np.prod(dims))
        if self.init == "he":
            std = np.sqrt(2.0 / fan_in)
            vals = (self.rng.normal(count) * std).astype(self.dtype).reshape(dims)
        else:
            vals = np.zeros(dims, dtype=self.dtype)
        self._add(name, vals)

    def zeros(self, name: str, dims) -> None:
        self._add(name, np.zeros(dims, dtype=self.dtype))

    def ones(self, name: str, dims) -> None:
        self._add(name, np.ones(dims, dtype=self.dtype))

    def bn_state(self, name: str, channels: int) -> None:
        self.bn_states[name] = BnState(channels, dtype=self.dtype)


@dataclass
class _Ctx:
    tape: Tape
    pnodes: dict[str, Node]
    bn: dict[str, BnState]


class _ConvUnit:
    def __init__(self, name: str, spec: Conv2dSpec):
        self.name = name
        self.spec = spec

    def register(self, reg: _Registrar) -> None:
        s = self.spec
        fan_in = (s.in_channels // s.groups) * s.kernel[0] * s.kernel[1]
        reg.conv_weight(f"{self.name}.weight", s.weight_dims, fan_in)
        if s.has_bias:
            reg.zeros(f"{self.name}.bias", s.bias_dims)

    def apply(self, ctx: _Ctx, x: Node) -> Node:
        bias = ctx.pnodes[f"{self.name}.bias"] if self.spec.has_bias else None
        return conv2d(x, self.spec, ctx.pnodes[f"{self.name}.weight"], bias)


class _BnUnit:
    def __init__(self, name: str, channels: int):
        self.name = name
        self.channels = channels

    def register(self, reg: _Registrar) -> None:
        reg.ones(f"{self.name}.gamma", (1, self.channels, 1, 1))
        reg.zeros(f"{self.name}.beta", (1, self.channels, 1, 1))
        reg.bn_state(self.name, self.channels)

    def apply(self, ctx: _Ctx, x: Node) -> Node:
        return batchnorm(x, ctx.pnodes[f"{self.name}.gamma"],
                         ctx.pnodes[f"{self.name}.beta"], ctx.bn[self.name])


class ResidualBlock:
    """Pre-activation unit: BN-ReLU-conv3x3, BN-ReLU-conv3x3, plus an
    identity shortcut (1x1 projection when the width changes)."""

    def __init__(self, name: str, cin: int, cout: int):
        self.bn1 = _BnUnit(f"{name}.bn1", cin)
        self.conv1 = _ConvUnit(f"{name}.conv1",
                               Conv2dSpec(cin, cout, (3, 3), padding=(1, 1)))
        self.bn2 = _BnUnit(f"{name}.bn2", cout)
        self.conv2 = _ConvUnit(f"{name}.conv2",
                               Conv2dSpec(cout, cout, (3, 3), padding=(1, 1)))
        self.shortcut = (_ConvUnit(f"{name}.shortcut", Conv2dSpec(cin, cout, (1, 1)))
                         if cin != cout else None)

    def register(self, reg: _Registrar) -> None:
        self.bn1.register(reg)
        self.conv1.register(reg)
        self.bn2.register(reg)
        self.conv2.register(reg)
        if self.shortcut is not None:
            self.shortcut.register(reg)

    def apply(self, ctx: _Ctx, x: Node) -> Node:
        h = self.conv1.apply(ctx, relu(self.bn1.apply(ctx, x)))
        h = self.conv2.apply(ctx, relu(self.bn2.apply(ctx, h)))
        s = self.shortcut.apply(ctx, x) if self.shortcut is not None else x
        return add(h, s)


class BridgeBlock:
    """Three parallel branches at the bottleneck, summed elementwise:
    a dilated small-kernel conv branch, a dilated depthwise-separable
    branch, and the identity."""

    def __init__(self, name: str, c: int, atrous_k: int, dilation: int, sep_k: int):
        pad_a = same_padding(atrous_k, dilation)
        pad_s = same_padding(sep_k, dilation)
        self.at_bn = _BnUnit(f"{name}.atrous.bn", c)
        self.at_conv = _ConvUnit(f"{name}.atrous.conv",
                                 Conv2dSpec(c, c, (atrous_k, atrous_k),
                                            padding=(pad_a, pad_a), dilation=dilation))
        self.sep_bn = _BnUnit(f"{name}.sep.bn", c)
        self.sep_dw = _ConvUnit(f"{name}.sep.dw",
                                Conv2dSpec(c, c, (sep_k, sep_k), padding=(pad_s, pad_s),
                                           dilation=dilation, groups=c))
        self.sep_pw = _ConvUnit(f"{name}.sep.pw", Conv2dSpec(c, c, (1, 1)))

    def register(self, reg: _Registrar) -> None:
        self.at_bn.register(reg)
        self.at_conv.register(reg)
        self.sep_bn.register(reg)
        self.sep_dw.register(reg)
        self.sep_pw.register(reg)

    def apply(self, ctx: _Ctx, x: Node) -> Node:
        a = self.at_conv.apply(ctx, relu(self.at_bn.apply(ctx, x)))
        s = self.sep_pw.apply(ctx, self.sep_dw.apply(ctx, relu(self.sep_bn.apply(ctx, x))))
        return add(add(a, s), x)


class DoubleConv:
    """Two conv3x3+ReLU stages, the plain-UNet building block."""

    def __init__(self, name: str, cin: int, cout: int):
        self.conv1 = _ConvUnit(f"{name}.conv1", Conv2dSpec(cin, cout, (3, 3), padding=(1, 1)))
        self.conv2 = _ConvUnit(f"{name}.conv2", Conv2dSpec(cout, cout, (3, 3), padding=(1, 1)))

    def register(self, reg: _Registrar) -> None:
        self.conv1.register(reg)
        self.conv2.register(reg)

    def apply(self, ctx: _Ctx, x: Node) -> Node:
        return relu(self.conv2.apply(ctx, relu(self.conv1.apply(ctx, x))))


class UpConv:
    """Learned 2x up-convolution (2x2 kernel equivalent)."""

    def __init__(self, name: str, cin: int, cout: int):
        self.name = name
        self.cin = cin
        self.cout = cout

    def register(self, reg: _Registrar) -> None:
        reg.conv_weight(f"{self.name}.weight", (4 * self.cout, self.cin, 1, 1), self.cin)
        reg.zeros(f"{self.name}.bias", (1, self.cout, 1, 1))

    def apply(self, ctx: _Ctx, x: Node) -> Node:
        return upconv2x2(x, ctx.pnodes[f"{self.name}.weight"],
                         ctx.pnodes[f"{self.name}.bias"])


class Model:
    """Parameter registry plus the layer graph for one config."""

    def __init__(self, config: ModelConfig, dtype=F32, seed: int = 0, init: str = "he"):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)

        levels = config.levels
        ch = config.channels
        self._enc: list = []
        self._dec: list = []

        if config.variant == "opto":
            cin = config.in_channels
            for l in range(levels):
                self._enc.append(ResidualBlock(f"enc{l + 1}", cin, ch[l]))
                cin = ch[l]
            self._bridge = BridgeBlock("bridge", ch[-1], config.bridge_atrous_kernel,
                                       config.bridge_dilation, config.bridge_separable_kernel)
            dec_in = ch[-1]
            for di in range(levels):
                enc_c = ch[levels - 1 - di]
                out_c = enc_c // 2
                cat_c = dec_in + enc_c
                comp_w = config.decoder_compress[di]
                lvl = levels - di
                if comp_w:
                    compress = _ConvUnit(f"dec{lvl}.compress",
                                         Conv2dSpec(cat_c, comp_w, (1, 1)))
                    block = ResidualBlock(f"dec{lvl}.block", comp_w, out_c)
                else:
                    compress = None
                    block = ResidualBlock(f"dec{lvl}.block", cat_c, out_c)
                self._dec.append((compress, block))
                dec_in = out_c
            self._head = _ConvUnit("head", Conv2dSpec(dec_in, 1, (1, 1)))
        else:
            cin = config.in_channels
            for l in range(levels):
                self._enc.append(DoubleConv(f"enc{l + 1}", cin, ch[l]))
                cin = ch[l]
            bottleneck_c = ch[-1] * 2
            self._bridge = DoubleConv("bottleneck", ch[-1], bottleneck_c)
            dec_in = bottleneck_c
            for di in range(levels):
                enc_c = ch[levels - 1 - di]
                lvl = levels - di
                up = UpConv(f"up{lvl}", dec_in, enc_c)
                block = DoubleConv(f"dec{lvl}.block", 2 * enc_c, enc_c)
                self._dec.append((up, block))
                dec_in = enc_c
            self._head = _ConvUnit("head", Conv2dSpec(dec_in, 1, (1, 1)))

        reg = _Registrar(Rng(seed) if init == "he" else None, self.dtype, init)
        for unit in self._enc:
            unit.register(reg)
        self._bridge.register(reg)
        for first, block in self._dec:
            if first is not None:
                first.register(reg)
            block.register(reg)
        self._head.register(reg)
        self.params = reg.params
        self.bn_states = reg.bn_states

    @property
    def variant(self) -> str:
        return self.config.variant

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "infer"):
            raise ConfigError(f"unknown mode {mode!r}")
        for state in self.bn_states.values():
            state.mode = mode

    def set_params(self, new_params: dict[str, Tensor4]) -> None:
        if new_params.keys() != self.params.keys():
            raise ConfigError("parameter names do not match this model")
        self.params = dict(new_params)

    def forward(self, tape: Tape, x: Tensor4 | Node) -> tuple[Node, dict[str, Node]]:
        xn = tape.constant(x) if isinstance(x, Tensor4) else x
        n, c, h, w = xn.dims
        if c != self.config.in_channels:
            raise ShapeError(f"input has {c} channels, model expects {self.config.in_channels}")
        step = 1 << self.config.levels
        if h % step or w % step:
            raise ShapeError(f"input extents {h}x{w} must be divisible by {step}")
        pnodes = {name: tape.leaf(v) for name, v in self.params.items()}
        ctx = _Ctx(tape, pnodes, self.bn_states)

        skips = []
        cur = xn
        if self.variant == "opto":
            for block in self._enc:
                cur = block.apply(ctx, cur)
                skips.append(cur)
                cur = maxpool2(cur)
            cur = self._bridge.apply(ctx, cur)
            for di, (compress, block) in enumerate(self._dec):
                cur = upsample_nearest2(cur)
                cur = concat_channels(cur, skips[len(skips) - 1 - di])
                if compress is not None:
                    cur = compress.apply(ctx, cur)
                cur = block.apply(ctx, cur)
        else:
            for block in self._enc:
                cur = block.apply(ctx, cur)
                skips.append(cur)
                cur = maxpool2(cur)
            cur = self._bridge.apply(ctx, cur)
            for di, (up, block) in enumerate(self._dec):
                cur = up.apply(ctx, cur)
                cur = concat_channels(cur, skips[len(skips) - 1 - di])
                cur = block.apply(ctx, cur)
        out = sigmoid(self._head.apply(ctx, cur))
        return out, pnodes

    def bn_stats(self) -> dict[str, Tensor4]:
        out = {}
        for name, state in self.bn_states.items():
            c = state.channels
            out[f"{name}.running_mean"] = Tensor4(state.running_mean.reshape(1, c, 1, 1).copy())
            out[f"{name}.running_var"] = Tensor4(state.running_var.reshape(1, c, 1, 1).copy())
        return out

    def load_bn_stats(self, stats: dict[str, Tensor4]) -> None:
        for name, state in self.bn_states.items():
            try:
                mean = stats[f"{name}.running_mean"]
                var = stats[f"{name}.running_var"]
            except KeyError as exc:
                raise ConfigError(f"checkpoint lacks BN statistics for {name!r}") from exc
            if mean.size != state.channels or var.size != state.channels:
                raise ShapeError(f"BN statistics size mismatch for {name!r}")
            state.running_mean = mean.data.reshape(state.channels).astype(self.dtype)
            state.running_var = var.data.reshape(state.channels).astype(self.dtype)

    def param_table(self) -> list[tuple[str, int]]:
        """(group, parameter count) per top-level block, in creation order."""
        groups: dict[str, int] = {}
        for name, value in self.params.items():
            group = name.split(".")[0]
            groups[group] = groups.get(group, 0) + value.size
        return list(groups.items())


def count_params(model: Model) -> int:
    """Learnable elements: conv weights/biases and BN gamma/beta.
    BN running statistics are not learnable and are excluded."""
    return sum(v.size for v in model.params.values())


def build_opto_unet(config: ModelConfig | None = None, seed: int = 0,
                    dtype=F32, init: str = "he") -> Model:
    config = config or ModelConfig()
    if config.variant != "opto":
        raise ConfigError(f"expected opto config, got variant {config.variant!r}")
    return Model(config, dtype=dtype, seed=seed, init=init)


def build_baseline_unet(config: ModelConfig | None = None, seed: int = 0,
                        dtype=F32, init: str = "he") -> Model:
    config = config or ModelConfig(variant="baseline")
    if config.variant != "baseline":
        raise ConfigError(f"expected baseline config, got variant {config.variant!r}")
    return Model(config, dtype=dtype, seed=seed, init=init)


def build_model(config: ModelConfig, seed: int = 0, dtype=F32, init: str = "he") -> Model:
    return Model(config, dtype=dtype, seed=seed, init=init)
