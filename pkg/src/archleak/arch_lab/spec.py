"""Declarative architecture descriptions and the ResNet-50 -> ConvNeXt-T ladder."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any


class Family(str, Enum):
    MORPH_LADDER = "MorphLadder"
    TINY_VIT = "TinyViT"


class BlockStyle(str, Enum):
    BOTTLENECK = "Bottleneck"
    DEPTHWISE_BOTTLENECK = "DepthwiseBottleneck"
    INVERTED_DEPTHWISE = "InvertedDepthwise"
    CONVNEXT_BLOCK = "ConvNeXtBlock"


class Activation(str, Enum):
    RELU = "ReLU"
    GELU = "GELU"


class Norm(str, Enum):
    BATCH_NORM = "BatchNorm"
    LAYER_NORM = "LayerNorm"


class NormCount(str, Enum):
    FULL = "Full"
    REDUCED = "Reduced"


class SpecError(ValueError):
    """Raised for out-of-domain or internally inconsistent architecture specs."""


@dataclass(frozen=True)
class StemSpec:
    # A ResNet-style stem (maxpool=True) also carries an activation before the pool;
    # the "new stem" of step 8 drops both together.
    kernel: int = 7
    stride: int = 2
    maxpool: bool = True


@dataclass(frozen=True)
class VitSpec:
    patch: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 4.0


@dataclass(frozen=True)
class ArchSpec:
    family: Family = Family.MORPH_LADDER
    morph_step: int | None = 1
    stage_depths: tuple[int, int, int, int] = (3, 4, 6, 3)
    stage_channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    stem: StemSpec = field(default_factory=StemSpec)
    block_style: BlockStyle = BlockStyle.BOTTLENECK
    block_kernel: int = 3
    activation: Activation = Activation.RELU
    activation_mask: tuple[bool, bool, bool] = (True, True, True)
    norm: Norm = Norm.BATCH_NORM
    norm_count: NormCount = NormCount.FULL
    conv_bias: bool = False
    separate_downsample: bool = False
    stochastic_depth: bool = False
    layer_scale: bool = False
    vit: VitSpec | None = None
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.stage_depths) != 4 or len(self.stage_channels) != 4:
            raise SpecError("stage_depths and stage_channels must have length 4")
        if min(self.stage_depths) < 1 or min(self.stage_channels) < 1:
            raise SpecError("stage depths and channels must be positive")
        if len(self.activation_mask) != 3:
            raise SpecError("activation_mask must have three entries")
        if self.num_classes < 1:
            raise SpecError("num_classes must be positive")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.family is Family.MORPH_LADDER:
            if self.morph_step is not None and not 1 <= self.morph_step <= 14:
                raise SpecError(f"morph_step must be in 1..14, got {self.morph_step}")
        elif self.family is Family.TINY_VIT:
            if self.vit is None:
                raise SpecError("TinyViT spec requires a vit record")
            if self.vit.dim % self.vit.heads:
                raise SpecError("vit.dim must be divisible by vit.heads")

    def replace(self, **changes: Any) -> "ArchSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, Enum):
                value = value.value
            elif dataclasses.is_dataclass(value):
                value = dataclasses.asdict(value)
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ArchSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SpecError(f"unknown ArchSpec fields: {sorted(unknown)}")
        kw = dict(data)
        enums = {"family": Family, "block_style": BlockStyle, "activation": Activation,
                 "norm": Norm, "norm_count": NormCount}
        for name, enum in enums.items():
            if name in kw:
                kw[name] = enum(kw[name])
        for name in ("stage_depths", "stage_channels", "input_shape"):
            if name in kw:
                kw[name] = tuple(int(v) for v in kw[name])
        if "activation_mask" in kw:
            kw["activation_mask"] = tuple(bool(v) for v in kw["activation_mask"])
        if isinstance(kw.get("stem"), dict):
            kw["stem"] = StemSpec(**kw["stem"])
        if isinstance(kw.get("vit"), dict):
            kw["vit"] = VitSpec(**kw["vit"])
        return cls(**kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        """Content hash embedded in checkpoints and result records."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


# Fields touched by each ladder step (step k relative to step k-1).
STEP_CHANGES: dict[int, frozenset[str]] = {
    2: frozenset({"stage_channels"}),
    3: frozenset({"stage_depths"}),
    4: frozenset({"stem"}),
    5: frozenset({"block_style"}),
    6: frozenset({"block_style"}),
    7: frozenset({"block_style", "block_kernel"}),
    8: frozenset({"stem"}),
    9: frozenset({"activation"}),
    10: frozenset({"activation_mask"}),
    11: frozenset({"norm_count"}),
    12: frozenset({"norm", "conv_bias"}),
    13: frozenset({"separate_downsample"}),
    14: frozenset({"stochastic_depth", "layer_scale"}),
}

STEP_NAMES = {
    1: "ResNet-50",
    2: "Channel dim",
    3: "Stage ratio",
    4: "Patchify",
    5: "ResNeXtify",
    6: "Inv bottleneck",
    7: "Kernel sizes",
    8: "New stem",
    9: "ReLU to GELU",
    10: "Removing Act",
    11: "Removing BN",
    12: "BN to LN",
    13: "Sep downsamp",
    14: "ConvNeXt",
}


def _apply_step(spec: ArchSpec, step: int) -> ArchSpec:
    if step == 2:
        return spec.replace(stage_channels=(96, 192, 384, 768))
    if step == 3:
        return spec.replace(stage_depths=(3, 3, 9, 3))
    if step == 4:
        return spec.replace(stem=StemSpec(kernel=4, stride=4, maxpool=True))
    if step == 5:
        return spec.replace(block_style=BlockStyle.DEPTHWISE_BOTTLENECK)
    if step == 6:
        return spec.replace(block_style=BlockStyle.INVERTED_DEPTHWISE)
    if step == 7:
        return spec.replace(block_style=BlockStyle.CONVNEXT_BLOCK, block_kernel=7)
    if step == 8:
        return spec.replace(stem=dataclasses.replace(spec.stem, maxpool=False))
    if step == 9:
        return spec.replace(activation=Activation.GELU)
    if step == 10:
        return spec.replace(activation_mask=(False, True, False))
    if step == 11:
        return spec.replace(norm_count=NormCount.REDUCED)
    if step == 12:
        return spec.replace(norm=Norm.LAYER_NORM, conv_bias=True)
    if step == 13:
        return spec.replace(separate_downsample=True)
    if step == 14:
        return spec.replace(stochastic_depth=True, layer_scale=True)
    raise AssertionError(step)


def spec_for_step(step: int, num_classes: int = 10,
                  input_shape: tuple[int, int, int] = (3, 32, 32)) -> ArchSpec:
    """Architecture at position ``step`` of the 14-step ResNet-50 -> ConvNeXt-T ladder."""
    if not isinstance(step, int) or not 1 <= step <= 14:
        raise SpecError(f"morph step must be an integer in 1..14, got {step!r}")
    spec = ArchSpec(num_classes=num_classes, input_shape=tuple(input_shape), morph_step=1)
    for k in range(2, step + 1):
        spec = _apply_step(spec, k).replace(morph_step=k)
    return spec


def spec_diff(a: ArchSpec, b: ArchSpec, ignore=("morph_step",)) -> set[str]:
    return {f.name for f in dataclasses.fields(ArchSpec)
            if f.name not in ignore and getattr(a, f.name) != getattr(b, f.name)}


def shrink(spec: ArchSpec, width_div: int = 16, depth_div: int = 3,
           min_width: int = 2) -> ArchSpec:
    """Desk-scale copy of a ladder spec: widths divided, depths ceil-divided.

    Every structural flag is preserved, so consecutive shrunk steps differ in the
    same fields as the full-size steps.
    """
    if spec.family is not Family.MORPH_LADDER:
        raise SpecError("shrink applies to MorphLadder specs only")
    channels = tuple(max(min_width, c // width_div) for c in spec.stage_channels)
    depths = tuple(max(1, math.ceil(d / depth_div)) for d in spec.stage_depths)
    return spec.replace(stage_channels=channels, stage_depths=depths)


def tiny_ladder_spec(step: int, num_classes: int = 10,
                     input_shape: tuple[int, int, int] = (3, 16, 16),
                     width_div: int = 16, depth_div: int = 3) -> ArchSpec:
    return shrink(spec_for_step(step, num_classes, input_shape), width_div, depth_div)


def tiny_vit_spec(patch: int = 4, dim: int = 64, depth: int = 4, heads: int = 4,
                  mlp_ratio: float = 4.0, num_classes: int = 10,
                  input_shape: tuple[int, int, int] = (3, 16, 16)) -> ArchSpec:
    return ArchSpec(family=Family.TINY_VIT, morph_step=None,
                    vit=VitSpec(patch, dim, depth, heads, mlp_ratio),
                    num_classes=num_classes, input_shape=tuple(input_shape))


def vit_b_spec(num_classes: int = 10, input_shape=(3, 32, 32)) -> ArchSpec:
    """ViT-B/16 geometry, used for parameter accounting only."""
    return tiny_vit_spec(patch=16, dim=768, depth=12, heads=12, mlp_ratio=4.0,
                         num_classes=num_classes, input_shape=input_shape)
