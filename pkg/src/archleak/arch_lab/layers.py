import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .spec import Activation, ArchSpec, BlockStyle, Norm, NormCount


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel dimension at every spatial position (NCHW input)."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mean = x.mean(1, keepdim=True)
        var = (x - mean).pow(2).mean(1, keepdim=True)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * mask / keep


def make_norm(spec: ArchSpec, channels: int) -> nn.Module:
    if spec.norm is Norm.LAYER_NORM:
        return LayerNorm2d(channels)
    return nn.BatchNorm2d(channels)


def make_act(spec: ArchSpec) -> nn.Module:
    return nn.GELU() if spec.activation is Activation.GELU else nn.ReLU()


def stem_padding(kernel: int, stride: int) -> int:
    return max(0, (kernel - stride + 1) // 2)


def block_out_channels(spec: ArchSpec, width: int) -> int:
    if spec.block_style in (BlockStyle.BOTTLENECK, BlockStyle.DEPTHWISE_BOTTLENECK):
        return 4 * width
    return width


def block_convs(spec: ArchSpec, in_ch: int, width: int, stride: int):
    """(in, out, kernel, stride, groups) for the three convolutions of one block."""
    k = spec.block_kernel
    style = spec.block_style
    if style is BlockStyle.BOTTLENECK:
        return [(in_ch, width, 1, 1, 1), (width, width, k, stride, 1),
                (width, 4 * width, 1, 1, 1)]
    if style is BlockStyle.DEPTHWISE_BOTTLENECK:
        return [(in_ch, width, 1, 1, 1), (width, width, k, stride, width),
                (width, 4 * width, 1, 1, 1)]
    if style is BlockStyle.INVERTED_DEPTHWISE:
        return [(in_ch, 4 * width, 1, 1, 1), (4 * width, 4 * width, k, stride, 4 * width),
                (4 * width, width, 1, 1, 1)]
    # depthwise conv moved to the front of the block
    return [(in_ch, in_ch, k, stride, in_ch), (in_ch, 4 * width, 1, 1, 1),
            (4 * width, width, 1, 1, 1)]


class LadderBlock(nn.Module):
    """Residual block covering every block style on the ladder.

    Activation slots: after conv1, after conv2, after the residual add.
    """

    def __init__(self, spec: ArchSpec, in_ch: int, width: int, stride: int,
                 drop_path: float = 0.0):
        super().__init__()
        convs = block_convs(spec, in_ch, width, stride)
        out_ch = block_out_channels(spec, width)
        for i, (ci, co, k, s, g) in enumerate(convs, start=1):
            conv = nn.Conv2d(ci, co, k, s, padding=k // 2, groups=g, bias=spec.conv_bias)
            setattr(self, f"conv{i}", conv)
        n_norms = 3 if spec.norm_count is NormCount.FULL else 1
        self.norms = nn.ModuleList(make_norm(spec, convs[i][1]) for i in range(n_norms))
        self.act = make_act(spec)
        self.mask = tuple(spec.activation_mask)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=spec.conv_bias),
                make_norm(spec, out_ch))
        else:
            self.shortcut = nn.Identity()
        self.gamma = nn.Parameter(torch.full((out_ch,), 1e-6)) if spec.layer_scale else None
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        identity = self.shortcut(x)
        out = x
        for i, conv in enumerate((self.conv1, self.conv2, self.conv3)):
            out = conv(out)
            if i < len(self.norms):
                out = self.norms[i](out)
            if i < 2 and self.mask[i]:
                out = self.act(out)
        if self.gamma is not None:
            out = out * self.gamma[:, None, None]
        out = self.drop_path(out) + identity
        if self.mask[2]:
            out = self.act(out)
        return out


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(b, n, 3, h, d // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(d // h)
        out = attn.softmax(-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class ViTBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))
