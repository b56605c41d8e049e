from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import torch
import torch.nn as nn

from .layers import (LadderBlock, ViTBlock, block_out_channels, make_act, make_norm,
                     stem_padding)
from .spec import ArchSpec, Family


class ModuleTag(str, Enum):
    STEM = "Stem"
    ATTENTION = "Attention"
    MLP = "MLP"
    NORM = "Norm"
    HEAD = "Head"
    OTHER = "Other"


class ShapeError(ValueError):
    pass


class LadderNet(nn.Module):
    def __init__(self, spec: ArchSpec):
        super().__init__()
        c_in = spec.input_shape[0]
        c0 = spec.stage_channels[0]
        k, s = spec.stem.kernel, spec.stem.stride
        stem = [nn.Conv2d(c_in, c0, k, s, padding=stem_padding(k, s), bias=spec.conv_bias),
                make_norm(spec, c0)]
        if spec.stem.maxpool:
            stem += [make_act(spec), nn.MaxPool2d(3, 2, padding=1)]
        self.stem = nn.Sequential(*stem)

        n_blocks = sum(spec.stage_depths)
        rates = ([0.1 * i / max(1, n_blocks - 1) for i in range(n_blocks)]
                 if spec.stochastic_depth else [0.0] * n_blocks)
        self.downsample = nn.ModuleList()
        self.stages = nn.ModuleList()
        ch = c0
        b = 0
        for i, (depth, width) in enumerate(zip(spec.stage_depths, spec.stage_channels)):
            if spec.separate_downsample and i > 0:
                self.downsample.append(nn.Sequential(
                    make_norm(spec, ch), nn.Conv2d(ch, width, 2, 2, bias=spec.conv_bias)))
                ch = width
            blocks = []
            for j in range(depth):
                stride = 2 if (i > 0 and j == 0 and not spec.separate_downsample) else 1
                blocks.append(LadderBlock(spec, ch, width, stride, rates[b]))
                ch = block_out_channels(spec, width)
                b += 1
            self.stages.append(nn.Sequential(*blocks))
        self.feature_dim = ch
        self.head = nn.Linear(ch, spec.num_classes)

    def feature_map(self, x):
        x = self.stem(x)
        for i, stage in enumerate(self.stages):
            if i > 0 and len(self.downsample):
                x = self.downsample[i - 1](x)
            x = stage(x)
        return x

    def forward_features(self, x):
        return self.feature_map(x).mean((2, 3))

    def forward(self, x):
        return self.head(self.forward_features(x))


class TinyViT(nn.Module):
    """Plain ViT: patch embedding, class token, learned positions, global attention."""

    def __init__(self, spec: ArchSpec):
        super().__init__()
        v = spec.vit
        c, h, w = spec.input_shape
        n_patches = (h // v.patch) * (w // v.patch)
        self.patch_embed = nn.Conv2d(c, v.dim, v.patch, v.patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, v.dim))
        self.pos_embed = nn.Parameter(torch.randn(1, n_patches + 1, v.dim) * 0.02)
        self.blocks = nn.ModuleList(ViTBlock(v.dim, v.heads, v.mlp_ratio)
                                    for _ in range(v.depth))
        self.norm = nn.LayerNorm(v.dim, eps=1e-6)
        self.head = nn.Linear(v.dim, spec.num_classes)
        self.feature_dim = v.dim

    def forward_features(self, x):
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1)
        x = x + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)[:, 0]

    def forward(self, x):
        return self.head(self.forward_features(x))


_NORM_TYPES = (nn.BatchNorm2d, nn.LayerNorm)


def _is_norm(module: nn.Module) -> bool:
    return isinstance(module, _NORM_TYPES) or type(module).__name__ == "LayerNorm2d"


def _ladder_tags(net: LadderNet) -> dict[str, ModuleTag]:
    tags = {}
    for mod_name, module in net.named_modules():
        for p_name, _ in module.named_parameters(recurse=False):
            name = f"{mod_name}.{p_name}" if mod_name else p_name
            if name.startswith("stem."):
                tags[name] = ModuleTag.STEM
            elif name.startswith("head."):
                tags[name] = ModuleTag.HEAD
            elif _is_norm(module):
                tags[name] = ModuleTag.NORM
            else:
                tags[name] = ModuleTag.OTHER
    return tags


def _vit_tags(net: TinyViT) -> dict[str, ModuleTag]:
    tags = {}
    for name, _ in net.named_parameters():
        root = name.split(".")[0]
        if root in ("patch_embed", "cls_token", "pos_embed"):
            tags[name] = ModuleTag.STEM
        elif root in ("norm", "head"):
            tags[name] = ModuleTag.HEAD
        elif ".attn." in name:
            tags[name] = ModuleTag.ATTENTION
        elif ".mlp." in name:
            tags[name] = ModuleTag.MLP
        elif ".norm1." in name or ".norm2." in name:
            tags[name] = ModuleTag.NORM
        else:
            tags[name] = ModuleTag.OTHER
    return tags


@dataclass
class TaggedModel:
    network: nn.Module
    tags: dict[str, ModuleTag]
    spec: ArchSpec
    seed: int = 0
    param_counts: dict[ModuleTag, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.param_counts:
            params = dict(self.network.named_parameters())
            counts = Counter()
            for name, tag in self.tags.items():
                counts[tag] += params[name].numel()
            self.param_counts = {t: counts.get(t, 0) for t in ModuleTag}

    @property
    def total_params(self) -> int:
        return sum(p.numel() for p in self.network.parameters() if p.requires_grad)

    def names_with(self, selection) -> list[str]:
        sel = set(selection)
        return [n for n, _ in self.network.named_parameters() if self.tags[n] in sel]

    def __call__(self, x):
        return self.network(x)


def check_input(spec: ArchSpec) -> None:
    _, h, w = spec.input_shape
    step = spec.vit.patch if spec.family is Family.TINY_VIT else spec.stem.stride
    what = "patch size" if spec.family is Family.TINY_VIT else "stem stride"
    if h % step or w % step:
        raise ShapeError(
            f"input spatial size {h}x{w} is not divisible by the {what} {step}; "
            f"resize or crop inputs to a multiple of {step}")
    if spec.family is Family.MORPH_LADDER and spec.separate_downsample:
        # three 2x2/2 downsampling convs follow the stem and need at least 2x2 maps
        need = step * 8
        if h % need or w % need:
            raise ShapeError(
                f"input spatial size {h}x{w} is too small or not divisible by {need} "
                f"(stem stride {step} times three 2x2 downsampling layers)")


def build(spec: ArchSpec, seed: int = 0, device=None) -> TaggedModel:
    """Instantiate ``spec`` with weights drawn from ``seed`` (deterministic)."""
    check_input(spec)
    with torch.random.fork_rng(devices=[]), torch.device(device or "cpu"):
        torch.manual_seed(seed)
        if spec.family is Family.TINY_VIT:
            net = TinyViT(spec)
            tags = _vit_tags(net)
        else:
            net = LadderNet(spec)
            tags = _ladder_tags(net)
    return TaggedModel(net, tags, spec, seed)
