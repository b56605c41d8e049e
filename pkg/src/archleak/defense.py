"""Defenses: reverting leaky micro designs, and DPSGD with optional layer targeting.

Noise convention: each per-example gradient (restricted to the targeted parameters)
is clipped to L2 norm ``clip_norm``, the clipped gradients are averaged, and
N(0, (noise_multiplier * clip_norm / batch)^2) is added per coordinate. This equals
noising the clipped sum with std ``noise_multiplier * clip_norm`` and then dividing
by the batch size. No privacy accountant is provided; runs are parameterised by the
noise multiplier only.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn
from torch.func import functional_call, grad, vmap

from .arch_lab import ArchSpec, Family, ModuleTag, Norm, StemSpec


class DefenseError(ValueError):
    pass


ALL = "All"


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = 1.0
    noise_multiplier: float = 0.0
    target_tags: frozenset | str = ALL
    seed: int = 0

    def __post_init__(self):
        if not self.clip_norm > 0:
            raise DefenseError(f"clip_norm must be > 0, got {self.clip_norm}")
        if not self.noise_multiplier >= 0:
            raise DefenseError(f"noise_multiplier must be >= 0, got {self.noise_multiplier}")
        if self.target_tags != ALL:
            object.__setattr__(self, "target_tags",
                               frozenset(ModuleTag(t) for t in self.target_tags))

    def to_dict(self) -> dict:
        tags = self.target_tags if self.target_tags == ALL else sorted(t.value for t in self.target_tags)
        return {"clip_norm": self.clip_norm, "noise_multiplier": self.noise_multiplier,
                "target_tags": tags, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DpConfig":
        return cls(**d)


def targeted_names(names, tags: dict | None, cfg: DpConfig) -> list[str]:
    if cfg.target_tags == ALL:
        return list(names)
    if tags is None:
        raise DefenseError("layer-targeted DPSGD needs the model's parameter tags")
    return [n for n in names if tags[n] in cfg.target_tags]


def dp_step(per_example_gradients: dict[str, torch.Tensor], cfg: DpConfig,
            tags: dict | None = None, generator: torch.Generator | None = None,
            return_clipped: bool = False):
    """Aggregate per-example gradients (leading batch dim) into one noisy gradient.

    Parameters outside the targeted set are plainly averaged and never noised.
    """
    names = list(per_example_gradients)
    if not names:
        return {}
    batch = next(iter(per_example_gradients.values())).shape[0]
    targeted = targeted_names(names, tags, cfg)
    out = {n: g.mean(0) for n, g in per_example_gradients.items() if n not in targeted}
    clipped = {}
    if targeted:
        sq = sum(per_example_gradients[n].reshape(batch, -1).pow(2).sum(1) for n in targeted)
        norms = sq.sqrt()
        scale = cfg.clip_norm / torch.clamp(norms, min=cfg.clip_norm)
        for n in targeted:
            g = per_example_gradients[n]
            clipped[n] = g * scale.reshape((batch,) + (1,) * (g.ndim - 1)).to(g.dtype)
            avg = clipped[n].mean(0)
            if cfg.noise_multiplier > 0:
                std = cfg.noise_multiplier * cfg.clip_norm / batch
                avg = avg + std * torch.randn(avg.shape, generator=generator, dtype=avg.dtype)
            out[n] = avg
    out = {n: out[n] for n in names}
    if return_clipped:
        return out, clipped
    return out


def has_batch_norm(model: nn.Module) -> bool:
    return any(isinstance(m, nn.modules.batchnorm._BatchNorm) for m in model.modules())


def per_example_gradients(network: nn.Module, x: torch.Tensor, y: torch.Tensor,
                          loss_fn=None) -> dict[str, torch.Tensor]:
    """Gradient of each example's loss w.r.t. every trainable parameter, shape (B, *p)."""
    if has_batch_norm(network):
        raise DefenseError("BatchNorm mixes examples within a batch; per-example "
                           "gradients (and DPSGD) need a LayerNorm model")
    loss_fn = loss_fn or nn.functional.cross_entropy
    params = {n: p.detach() for n, p in network.named_parameters() if p.requires_grad}
    buffers = {n: b.detach() for n, b in network.named_buffers()}

    def one(p, xi, yi):
        out = functional_call(network, (p, buffers), (xi.unsqueeze(0),))
        return loss_fn(out, yi.unsqueeze(0))

    return vmap(grad(one), in_dims=(None, 0, 0), randomness="different")(params, x, y)


class Toggle(str, Enum):
    RESTORE_ACTIVATIONS = "RestoreActivations"
    RESNET_STEM = "ResNetStem"
    USE_BATCH_NORM = "UseBatchNorm"


def apply_component_defense(spec: ArchSpec, toggles) -> ArchSpec:
    """Revert privacy-leaking micro designs on a ladder spec. Pure."""
    toggles = {Toggle(t) for t in toggles}
    for t in sorted(toggles, key=lambda t: t.value):
        if spec.family is not Family.MORPH_LADDER:
            raise DefenseError(f"toggle {t.value} does not apply to {spec.family.value} specs")
    changes = {}
    if Toggle.RESTORE_ACTIVATIONS in toggles:
        changes["activation_mask"] = (True, True, True)
    if Toggle.RESNET_STEM in toggles:
        changes["stem"] = StemSpec(kernel=7, stride=2, maxpool=True)
    if Toggle.USE_BATCH_NORM in toggles:
        # BatchNorm'd convolutions carry no bias before step 12
        changes["norm"] = Norm.BATCH_NORM
        changes["conv_bias"] = False
    return dataclasses.replace(spec, **changes) if changes else spec
