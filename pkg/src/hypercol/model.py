"""ResNet-18-style backbone with a tap registry, pooled multi-layer head, and baseline head.

Both model kinds share the identical backbone: a 7x7/2 stem conv + BN +
ReLU + 3x3/2 max pool (zero-padded), then four stages of two basic blocks
with channel widths (64, 128, 256, 512) scaled by a width multiplier;
stages 2-4 downsample via a stride-2 first block with a 1x1 projection
shortcut.

Intermediate outputs are exposed as named tap points. The multi-layer
("hypercolumn") head reduces each tap with a 1x1 convolution, bilinearly
upsamples it to a fixed size, max-pools it with a large kernel, then
concatenates everything into one vector for a fully connected classifier.
The baseline head is global average pooling plus a fully connected layer
on the final stage output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ShapeError
from .rng import STREAM_PARAM_INIT, make_rng
from .tensor import Tensor, kaiming, ones, zeros

STAGE_WIDTHS = (64, 128, 256, 512)

# 9-tap default: the stem, both stage-1 blocks, the three downsampling
# projection shortcuts, and the last block of stages 2-4 (the final one is
# the network output feature).
DEFAULT_TAP_POINTS = (
    "stem",
    "stage1.block1",
    "stage1.block2",
    "stage2.proj",
    "stage2.block2",
    "stage3.proj",
    "stage3.block2",
    "stage4.proj",
    "stage4.block2",
)


@dataclass(frozen=True)
class BackboneSpec:
    width_multiplier: float = 1.0

    def widths(self) -> tuple[int, int, int, int]:
        if self.width_multiplier <= 0:
            raise ShapeError(f"width_multiplier must be > 0, got {self.width_multiplier}")
        return tuple(max(1, int(round(w * self.width_multiplier))) for w in STAGE_WIDTHS)


@dataclass(frozen=True)
class TapSpec:
    tap_points: tuple[str, ...] = DEFAULT_TAP_POINTS
    reduce_channels: int = 16
    upsample_to: tuple[int, int] = (224, 224)
    pool_kernel: tuple[int, int] = (56, 56)
    pool_stride: tuple[int, int] = (26, 26)
    conv_bias: bool = True

    def pooled_hw(self) -> tuple[int, int]:
        if self.upsample_to[0] < self.pool_kernel[0] or self.upsample_to[1] < self.pool_kernel[1]:
            raise ShapeError(
                f"upsample size {self.upsample_to} smaller than pool kernel {self.pool_kernel}"
            )
        return ops.conv_output_hw(*self.upsample_to, self.pool_kernel, self.pool_stride, (0, 0))

    def hyper_vector_len(self) -> int:
        ph, pw = self.pooled_hw()
        return len(self.tap_points) * self.reduce_channels * ph * pw


def valid_tap_names() -> tuple[str, ...]:
    names = ["stem"]
    for i in range(1, 5):
        if i > 1:
            names.append(f"stage{i}.proj")
        names.append(f"stage{i}.block1")
        names.append(f"stage{i}.block2")
    return tuple(names)


class _Init:
    """Hands each parameter its own deterministic RNG stream, in build order."""

    def __init__(self, seed: int):
        self.seed = seed
        self.ordinal = 0

    def next_rng(self) -> np.random.Generator:
        rng = make_rng(self.seed, STREAM_PARAM_INIT, self.ordinal)
        self.ordinal += 1
        return rng


class _Registry:
    """Named slots for parameters and running statistics."""

    def __init__(self):
        self.params: list[tuple[str, object, str]] = []
        self.stats: list[tuple[str, object, str]] = []

    def param(self, name: str, obj: object, attr: str) -> None:
        self.params.append((name, obj, attr))

    def stat(self, name: str, obj: object, attr: str) -> None:
        self.stats.append((name, obj, attr))


class Conv2d:
    def __init__(self, reg: _Registry, init: _Init, name: str, in_c: int, out_c: int,
                 kernel: tuple[int, int], stride: tuple[int, int] = (1, 1),
                 padding: tuple[int, int] = (0, 0), bias: bool = False):
        fan_in = in_c * kernel[0] * kernel[1]
        weight = kaiming((out_c, in_c, *kernel), init.next_rng(), fan_in, requires_grad=True)
        b = zeros((1, out_c, 1, 1), requires_grad=True) if bias else None
        self.params = ops.Conv2dParams(weight, b, stride, padding)
        reg.param(f"{name}.weight", self.params, "weight")
        if bias:
            reg.param(f"{name}.bias", self.params, "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.params)


class BatchNorm2d:
    def __init__(self, reg: _Registry, name: str, c: int):
        self.params = ops.BatchNorm2dParams(
            gamma=ones((1, c, 1, 1), requires_grad=True),
            beta=zeros((1, c, 1, 1), requires_grad=True),
            running_mean=zeros((1, c, 1, 1)),
            running_var=ones((1, c, 1, 1)),
        )
        reg.param(f"{name}.gamma", self.params, "gamma")
        reg.param(f"{name}.beta", self.params, "beta")
        reg.stat(f"{name}.running_mean", self.params, "running_mean")
        reg.stat(f"{name}.running_var", self.params, "running_var")

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        out, rm, rv = ops.batch_norm2d(x, self.params, "train" if train else "eval")
        if train:
            self.params.running_mean = rm
            self.params.running_var = rv
        return out


class Linear:
    def __init__(self, reg: _Registry, init: _Init, name: str, in_f: int, out_f: int):
        weight = kaiming((out_f, in_f, 1, 1), init.next_rng(), in_f, requires_grad=True)
        bias = zeros((1, out_f, 1, 1), requires_grad=True)
        self.params = ops.LinearParams(weight, bias)
        reg.param(f"{name}.weight", self.params, "weight")
        reg.param(f"{name}.bias", self.params, "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.params)


class BasicBlock:
    """conv3x3 -> BN -> ReLU -> conv3x3 -> BN, plus identity or projection shortcut."""

    def __init__(self, reg: _Registry, init: _Init, name: str, in_c: int, out_c: int,
                 stride: int):
        self.conv1 = Conv2d(reg, init, f"{name}.conv1", in_c, out_c, (3, 3),
                            (stride, stride), (1, 1))
        self.bn1 = BatchNorm2d(reg, f"{name}.bn1", out_c)
        self.conv2 = Conv2d(reg, init, f"{name}.conv2", out_c, out_c, (3, 3), (1, 1), (1, 1))
        self.bn2 = BatchNorm2d(reg, f"{name}.bn2", out_c)
        self.proj_conv: Conv2d | None = None
        self.proj_bn: BatchNorm2d | None = None
        if stride != 1 or in_c != out_c:
            self.proj_conv = Conv2d(reg, init, f"{name}.proj.conv", in_c, out_c, (1, 1),
                                    (stride, stride))
            self.proj_bn = BatchNorm2d(reg, f"{name}.proj.bn", out_c)

    def forward(self, x: Tensor, train: bool, taps: dict[str, Tensor],
                proj_tap: str | None) -> Tensor:
        y = ops.relu(self.bn1(self.conv1(x), train))
        y = self.bn2(self.conv2(y), train)
        shortcut = x
        if self.proj_conv is not None:
            shortcut = self.proj_bn(self.proj_conv(x), train)
            if proj_tap is not None:
                taps[proj_tap] = shortcut
        return ops.relu(ops.add(y, shortcut))


class Backbone:
    def __init__(self, reg: _Registry, init: _Init, spec: BackboneSpec):
        w = spec.widths()
        self.widths = w
        self.stem_conv = Conv2d(reg, init, "backbone.stem.conv", 3, w[0], (7, 7), (2, 2), (3, 3))
        self.stem_bn = BatchNorm2d(reg, "backbone.stem.bn", w[0])
        self.stages: list[list[BasicBlock]] = []
        in_c = w[0]
        for i, out_c in enumerate(w, start=1):
            stride = 1 if i == 1 else 2
            blocks = [
                BasicBlock(reg, init, f"backbone.stage{i}.block1", in_c, out_c, stride),
                BasicBlock(reg, init, f"backbone.stage{i}.block2", out_c, out_c, 1),
            ]
            self.stages.append(blocks)
            in_c = out_c

    def forward(self, x: Tensor, train: bool) -> tuple[Tensor, dict[str, Tensor]]:
        n, c, h, w = x.shape
        if c != 3:
            raise ShapeError(f"backbone expects 3 input channels, got {c}")
        if h % 32 or w % 32 or h == 0 or w == 0:
            raise ShapeError(f"input spatial dims must be divisible by 32, got {(h, w)}")
        taps: dict[str, Tensor] = {}
        y = ops.relu(self.stem_bn(self.stem_conv(x), train))
        y, _ = ops.max_pool2d(ops.zero_pad2d(y, (1, 1)), (3, 3), (2, 2))
        taps["stem"] = y
        for i, blocks in enumerate(self.stages, start=1):
            proj_tap = f"stage{i}.proj" if i > 1 else None
            y = blocks[0].forward(y, train, taps, proj_tap)
            taps[f"stage{i}.block1"] = y
            y = blocks[1].forward(y, train, taps, None)
            taps[f"stage{i}.block2"] = y
        return y, taps

    def tap_channels(self, name: str) -> int:
        if name == "stem":
            return self.widths[0]
        stage = int(name[5])
        return self.widths[stage - 1]


class HypercolumnHead:
    """One 1x1 reduction conv per tap plus the fully connected classifier."""

    def __init__(self, reg: _Registry, init: _Init, backbone: Backbone, spec: TapSpec,
                 num_classes: int):
        self.spec = spec
        self.tap_convs = [
            Conv2d(reg, init, f"head.tap.{name}", backbone.tap_channels(name),
                   spec.reduce_channels, (1, 1), bias=spec.conv_bias)
            for name in spec.tap_points
        ]
        self.classifier = Linear(reg, init, "head.fc", spec.hyper_vector_len(), num_classes)


class BaselineHead:
    def __init__(self, reg: _Registry, init: _Init, backbone: Backbone, num_classes: int):
        self.classifier = Linear(reg, init, "head.fc", backbone.widths[3], num_classes)


def hypercolumn_forward(taps: dict[str, Tensor], head: HypercolumnHead) -> Tensor:
    """Reduce, upsample, pool, and concatenate taps; return classifier logits."""
    spec = head.spec
    if tuple(taps.keys()) != spec.tap_points:
        raise ShapeError(
            f"tap order mismatch: got {tuple(taps.keys())}, head expects {spec.tap_points}"
        )
    pooled = []
    for conv, name in zip(head.tap_convs, spec.tap_points):
        y = conv(taps[name])
        y = ops.bilinear_upsample(y, *spec.upsample_to)
        y, _ = ops.max_pool2d(y, spec.pool_kernel, spec.pool_stride)
        pooled.append(y)
    hyper = ops.flatten(ops.concat_channels(pooled))
    return head.classifier(hyper)


class Model:
    """Classifier with a shared backbone and either head kind."""

    def __init__(self, kind: str, backbone_spec: BackboneSpec, tap_spec: TapSpec,
                 num_classes: int, seed: int):
        if kind not in ("baseline", "hypercolumn"):
            raise ShapeError(f"unknown model kind {kind!r}")
        if num_classes < 2:
            raise ShapeError(f"num_classes must be >= 2, got {num_classes}")
        unknown = set(tap_spec.tap_points) - set(valid_tap_names())
        if unknown:
            raise ShapeError(
                f"unknown tap points {sorted(unknown)}; valid: {valid_tap_names()}"
            )
        if len(set(tap_spec.tap_points)) != len(tap_spec.tap_points):
            raise ShapeError("duplicate tap points")
        self.kind = kind
        self.backbone_spec = backbone_spec
        self.tap_spec = tap_spec
        self.num_classes = num_classes
        self.seed = seed

        reg = _Registry()
        init = _Init(seed)
        self.backbone = Backbone(reg, init, backbone_spec)
        if kind == "hypercolumn":
            self.head: HypercolumnHead | BaselineHead = HypercolumnHead(
                reg, init, self.backbone, tap_spec, num_classes
            )
        else:
            self.head = BaselineHead(reg, init, self.backbone, num_classes)
        self._param_slots = {name: (obj, attr) for name, obj, attr in reg.params}
        self._stat_slots = {name: (obj, attr) for name, obj, attr in reg.stats}

    # -- parameter access ---------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return {name: getattr(obj, attr) for name, (obj, attr) in self._param_slots.items()}

    def stats(self) -> dict[str, Tensor]:
        return {name: getattr(obj, attr) for name, (obj, attr) in self._stat_slots.items()}

    def set_tensor(self, name: str, value: Tensor) -> None:
        slots = self._param_slots if name in self._param_slots else self._stat_slots
        if name not in slots:
            raise KeyError(f"model has no tensor named {name!r}")
        obj, attr = slots[name]
        current: Tensor = getattr(obj, attr)
        if current is not None and current.shape != value.shape:
            raise ShapeError(
                f"tensor {name!r} has shape {current.shape}, got {value.shape}"
            )
        setattr(obj, attr, value)

    # -- forward passes -----------------------------------------------------

    def forward_with_taps(self, x: Tensor, train: bool = False
                          ) -> tuple[Tensor, dict[str, Tensor]]:
        final, all_taps = self.backbone.forward(x, train)
        ordered = {name: all_taps[name] for name in self.tap_spec.tap_points}
        return final, ordered

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if self.kind == "hypercolumn":
            _, taps = self.forward_with_taps(x, train)
            return hypercolumn_forward(taps, self.head)
        final, _ = self.backbone.forward(x, train)
        pooled = ops.flatten(ops.global_avg_pool(final))
        return self.head.classifier(pooled)


def build_model(kind: str, backbone: BackboneSpec, taps: TapSpec, num_classes: int,
                seed: int) -> Model:
    """Deterministically initialised model; same seed gives bit-identical parameters."""
    return Model(kind, backbone, taps, num_classes, seed)
