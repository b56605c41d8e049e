from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from .layers import block_convs, block_out_channels, stem_padding
from .spec import ArchSpec, Family


class ConvGeom(NamedTuple):
    kernel: int
    stride: int
    padding: int = 0
    name: str = ""


@dataclass
class LayerRF:
    index: int
    kernel: int
    stride: int
    rf: int  # input pixels seen by one unit after this layer
    name: str = ""


@dataclass
class ReceptiveFieldReport:
    per_layer: list[LayerRF]
    total: int
    attention_global: bool = False
    layers: list[ConvGeom] = field(default_factory=list)


def backward_recursion(layers: Sequence[ConvGeom]) -> int:
    """R_i = s_{i+1} * R_{i+1} + (k_{i+1} - s_{i+1}), starting from R_n = 1."""
    r = 1
    for g in reversed(layers):
        r = g.stride * r + (g.kernel - g.stride)
    return r


def input_interval(layers: Sequence[ConvGeom], index: int) -> tuple[int, int]:
    """Unclipped input interval [lo, hi] read by output unit ``index`` along one axis."""
    lo = hi = index
    for g in reversed(layers):
        lo = lo * g.stride - g.padding
        hi = hi * g.stride - g.padding + g.kernel - 1
    return lo, hi


def output_size(layers: Sequence[ConvGeom], size: int) -> int:
    for g in layers:
        size = (size + 2 * g.padding - g.kernel) // g.stride + 1
    return size


def analyze(layers: Sequence[ConvGeom]) -> ReceptiveFieldReport:
    layers = [ConvGeom(*g) if not isinstance(g, ConvGeom) else g for g in layers]
    per_layer = []
    rf, jump = 1, 1
    for i, g in enumerate(layers, start=1):
        rf += (g.kernel - 1) * jump
        jump *= g.stride
        per_layer.append(LayerRF(i, g.kernel, g.stride, rf, g.name))
    total = backward_recursion(layers)
    assert not per_layer or per_layer[-1].rf == total
    return ReceptiveFieldReport(per_layer, total, False, list(layers))


def ladder_path(spec: ArchSpec) -> list[ConvGeom]:
    """Conv/pool geometry along the main (widest) spatial path of a ladder network."""
    k, s = spec.stem.kernel, spec.stem.stride
    path = [ConvGeom(k, s, stem_padding(k, s), "stem.conv")]
    if spec.stem.maxpool:
        path.append(ConvGeom(3, 2, 1, "stem.maxpool"))
    ch = spec.stage_channels[0]
    for i, (depth, width) in enumerate(zip(spec.stage_depths, spec.stage_channels)):
        if spec.separate_downsample and i > 0:
            path.append(ConvGeom(2, 2, 0, f"downsample.{i - 1}"))
            ch = width
        for j in range(depth):
            stride = 2 if (i > 0 and j == 0 and not spec.separate_downsample) else 1
            for c, (_, _, kk, ss, _) in enumerate(block_convs(spec, ch, width, stride), 1):
                path.append(ConvGeom(kk, ss, kk // 2, f"stages.{i}.{j}.conv{c}"))
            ch = block_out_channels(spec, width)
    return path


def receptive_field(spec: ArchSpec) -> ReceptiveFieldReport:
    if spec.family is Family.TINY_VIT:
        # attention reads every token, so one output unit sees the whole input
        _, h, w = spec.input_shape
        return ReceptiveFieldReport([], max(h, w), attention_global=True)
    return analyze(ladder_path(spec))
