"""Gradient inversion: rebuild a batch from the (optionally role-filtered) gradients it produced."""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .arch_lab import ModuleTag, TaggedModel
from .arch_lab.layers import DropPath
from .evalkit import reconstruction_metrics

ALL = "All"
PAPER_SNAPSHOTS = (1, 50, 100, 500, 1000, 1500, 2000, 2500, 3000)


class GiaError(RuntimeError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message if iteration is None else f"{message} at iteration {iteration}")
        self.iteration = iteration


class Cost(str, Enum):
    COSINE = "CosineSimilarity"
    SQUARED_L2 = "SquaredL2"


@dataclass(frozen=True)
class GiaConfig:
    cost: Cost = Cost.COSINE
    tv_weight: float = 1e-4
    optimizer: str = "Adam"
    lr: float = 0.1
    iterations: int = 3000
    seed: int = 0
    selection: frozenset | str = ALL
    snapshots: tuple[int, ...] = PAPER_SNAPSHOTS
    train_mode: bool = False

    def __post_init__(self):
        object.__setattr__(self, "cost", Cost(self.cost))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.optimizer != "Adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.selection != ALL:
            picked = [self.selection] if isinstance(self.selection, str) else self.selection
            sel = frozenset(ModuleTag(t) for t in picked)
            if not sel:
                raise ValueError("selection must be nonempty")
            object.__setattr__(self, "selection", sel)

    def to_dict(self) -> dict:
        sel = self.selection if self.selection == ALL else sorted(t.value for t in self.selection)
        return {"cost": self.cost.value, "tv_weight": self.tv_weight,
                "optimizer": self.optimizer, "lr": self.lr, "iterations": self.iterations,
                "seed": self.seed, "selection": sel, "snapshots": list(self.snapshots),
                "train_mode": self.train_mode}


def desk_config(**changes) -> GiaConfig:
    """The attack settings above with 1000 iterations instead of 3000."""
    kw = dict(iterations=1000, snapshots=(1, 50, 100, 500, 1000))
    kw.update(changes)
    return GiaConfig(**kw)


@dataclass
class InversionResult:
    reconstruction: torch.Tensor
    loss_trace: list[float]
    metrics: dict[str, float] | None
    snapshots: dict[int, torch.Tensor] = field(default_factory=dict)
    touched: frozenset[str] = frozenset()
    flags: list[str] = field(default_factory=list)


def _loss(network, x, labels):
    return F.cross_entropy(network(x), labels)


@contextmanager
def attack_mode(network: nn.Module, train_mode: bool):
    """Put ``network`` in the mode a client computes its update in.

    Training mode makes BatchNorm use the batch's own statistics. Stochastic depth
    stays off so the gradients are a deterministic function of the input, and the
    BatchNorm running statistics are restored on exit.
    """
    was_training = network.training
    buffers = {n: b.clone() for n, b in network.named_buffers()}
    network.train(train_mode)
    for m in network.modules():
        if isinstance(m, DropPath):
            m.eval()
    try:
        yield network
    finally:
        with torch.no_grad():
            for n, b in network.named_buffers():
                b.copy_(buffers[n])
        network.train(was_training)


def capture_gradients(model: TaggedModel, batch: torch.Tensor, labels: torch.Tensor,
                      train_mode: bool = False) -> dict[str, torch.Tensor]:
    """One gradient tensor per trainable parameter."""
    net = model.network
    names = [n for n, p in net.named_parameters() if p.requires_grad]
    params = [p for p in net.parameters() if p.requires_grad]
    with attack_mode(net, train_mode):
        grads = torch.autograd.grad(_loss(net, batch, labels), params)
    return {n: g.detach() for n, g in zip(names, grads)}


def select_gradients(bundle: dict[str, torch.Tensor], tags: dict[str, ModuleTag],
                     selection) -> dict[str, torch.Tensor]:
    if selection == ALL:
        return dict(bundle)
    sel = {ModuleTag(t) for t in selection}
    if not sel:
        raise ValueError("selection must be nonempty")
    out = {n: g for n, g in bundle.items() if tags[n] in sel}
    if not out:
        raise ValueError(f"no parameters tagged {sorted(t.value for t in sel)}; "
                         "the attack has nothing to match")
    return out


def total_variation(x: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between horizontal neighbours plus the same for vertical ones."""
    dx = (x[..., :, 1:] - x[..., :, :-1]).abs().mean()
    dy = (x[..., 1:, :] - x[..., :-1, :]).abs().mean()
    return dx + dy


def match_term(dummy: list[torch.Tensor], target: list[torch.Tensor], cost: Cost):
    """Returns (value, degenerate) where degenerate flags a zero-norm side under cosine."""
    if cost is Cost.SQUARED_L2:
        return sum(((d - t) ** 2).sum() for d, t in zip(dummy, target)), False
    dot = sum((d * t).sum() for d, t in zip(dummy, target))
    dn = sum(d.pow(2).sum() for d in dummy)
    tn = sum(t.pow(2).sum() for t in target)
    if float(dn.detach()) == 0.0 or float(tn) == 0.0:
        return dot * 0.0 + 1.0, True
    return 1.0 - dot / (dn.sqrt() * tn.sqrt()), False


def _step(net, dummy, labels, params, target, cfg, opt, trace, flags):
    opt.zero_grad()
    grads = torch.autograd.grad(_loss(net, dummy, labels), params, create_graph=True)
    match, degenerate = match_term(list(grads), target, cfg.cost)
    if degenerate and "zero_norm_gradient" not in flags:
        flags.append("zero_norm_gradient")
    cost = match + cfg.tv_weight * total_variation(dummy) if cfg.tv_weight else match
    value = float(cost.detach())
    if not math.isfinite(value):
        raise GiaError("non-finite inversion cost", len(trace))
    trace.append(value)
    if cost.requires_grad:
        cost.backward()
        opt.step()
    with torch.no_grad():
        dummy.clamp_(0, 1)


def invert(model: TaggedModel, bundle: dict[str, torch.Tensor], labels: torch.Tensor,
           cfg: GiaConfig, ground_truth: torch.Tensor | None = None,
           init: torch.Tensor | None = None, shape=None) -> InversionResult:
    """Optimise a dummy batch in [0, 1] until its gradients match ``bundle``.

    ``loss_trace[t]`` is the cost evaluated at the dummy before update ``t + 1``;
    snapshot ``i`` is the dummy after ``i`` updates.
    """
    net = model.network
    named = dict(net.named_parameters())
    names = [n for n in bundle]  # only parameters present in the filtered bundle
    params = [named[n] for n in names]
    target = [bundle[n].detach() for n in names]
    if shape is None:
        shape = ground_truth.shape if ground_truth is not None else \
            (len(labels),) + tuple(model.spec.input_shape)
    if init is None:
        gen = torch.Generator().manual_seed(cfg.seed)
        dummy = torch.rand(shape, generator=gen)
    else:
        dummy = init.detach().clone()
    dummy.requires_grad_(True)
    opt = torch.optim.Adam([dummy], lr=cfg.lr)
    snaps = set(cfg.snapshots)
    trace, snapshots, flags = [], {}, []
    with attack_mode(net, cfg.train_mode):
        for it in range(cfg.iterations):
            _step(net, dummy, labels, params, target, cfg, opt, trace, flags)
            if it + 1 in snaps:
                snapshots[it + 1] = dummy.detach().clone()
    recon = dummy.detach().clone()
    metrics = reconstruction_metrics(ground_truth, recon) if ground_truth is not None else None
    return InversionResult(recon, trace, metrics, snapshots, frozenset(names), flags)


def attack(model: TaggedModel, images: torch.Tensor, labels: torch.Tensor,
           cfg: GiaConfig) -> InversionResult:
    """Capture gradients for ``images``, filter them by ``cfg.selection``, invert."""
    grads = capture_gradients(model, images, labels, cfg.train_mode)
    bundle = select_gradients(grads, model.tags, cfg.selection)
    return invert(model, bundle, labels, cfg, ground_truth=images)
