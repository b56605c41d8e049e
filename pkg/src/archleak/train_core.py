"""Splits, training recipes, victim/shadow training, and overfitting level."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .arch_lab import ArchSpec, TaggedModel, build
from .data import ImageData
from .defense import DpConfig, dp_step, per_example_gradients

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


@dataclass(frozen=True)
class SplitPlan:
    victim_train: tuple[int, ...]
    victim_test: tuple[int, ...]
    shadow_train: tuple[int, ...]
    shadow_test: tuple[int, ...]
    seed: int

    @property
    def subsets(self):
        return (self.victim_train, self.victim_test, self.shadow_train, self.shadow_test)


def make_split(pool_size: int, seed: int = 0) -> SplitPlan:
    """Shuffle ``range(pool_size)`` and cut it into four near-equal parts.

    Remainder rule: the first ``pool_size % 4`` subsets get one extra index, in the
    order victim_train, victim_test, shadow_train, shadow_test.
    """
    if pool_size < 8:
        raise ValueError(f"pool_size must be >= 8, got {pool_size}")
    perm = np.random.default_rng(seed).permutation(pool_size)
    parts = np.array_split(perm, 4)
    return SplitPlan(*(tuple(int(i) for i in p) for p in parts), seed=seed)


class Optimizer(str, Enum):
    ADAMW = "AdamW"
    SGD = "SGD"
    ADAM = "Adam"


class Schedule(str, Enum):
    COSINE = "CosineAnnealing"
    NONE = "None"


class RecipeKind(str, Enum):
    MEMBERSHIP_VICTIM = "MembershipVictim"
    ATTRIBUTE_VICTIM = "AttributeVictim"


@dataclass(frozen=True)
class RecipeConfig:
    optimizer: Optimizer = Optimizer.ADAMW
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum_or_betas: tuple[float, ...] = (0.9, 0.999)
    schedule: Schedule = Schedule.NONE
    epochs: int = 1
    batch_size: int = 64
    mixup: float | None = None
    cutmix: float | None = None
    label_smoothing: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        object.__setattr__(self, "momentum_or_betas", tuple(self.momentum_or_betas))
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def override(self, **changes) -> "RecipeConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["optimizer"] = self.optimizer.value
        d["schedule"] = self.schedule.value
        d["momentum_or_betas"] = list(self.momentum_or_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RecipeConfig":
        return cls(**d)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def default_recipe(kind) -> RecipeConfig:
    kind = RecipeKind(kind)
    if kind is RecipeKind.MEMBERSHIP_VICTIM:
        return RecipeConfig(Optimizer.ADAMW, lr=0.001, weight_decay=0.05,
                            momentum_or_betas=(0.9, 0.999), schedule=Schedule.COSINE,
                            epochs=300, batch_size=256, mixup=0.8, cutmix=1.0,
                            label_smoothing=None)
    return RecipeConfig(Optimizer.SGD, lr=0.01, weight_decay=0.0005,
                        momentum_or_betas=(0.9,), schedule=Schedule.NONE,
                        epochs=100, batch_size=256)


def overfit_recipe(epochs: int = 100, batch_size: int = 32, lr: float = 3e-3) -> RecipeConfig:
    """Desk preset that memorises a small training set: no augmentation, no decay."""
    return RecipeConfig(Optimizer.ADAM, lr=lr, weight_decay=0.0, momentum_or_betas=(0.9, 0.999),
                        schedule=Schedule.NONE, epochs=epochs, batch_size=batch_size)


@dataclass
class TrainedVictim:
    model: TaggedModel
    recipe: RecipeConfig
    split: SplitPlan | None
    train_acc: float
    test_acc: float
    history: list[tuple[float, float]] = field(default_factory=list)
    seed: int = 0
    dp: DpConfig | None = None

    def __post_init__(self):
        for acc in (self.train_acc, self.test_acc):
            if not (math.isnan(acc) or 0.0 <= acc <= 1.0):
                raise ValueError(f"accuracy out of range: {acc}")


def overfitting_level(v: TrainedVictim) -> float:
    return v.train_acc - v.test_acc


@torch.no_grad()
def predict_logits(network: nn.Module, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    was_training = network.training
    network.eval()
    out = torch.cat([network(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    network.train(was_training)
    return out


def accuracy(network: nn.Module, data: ImageData) -> float:
    if len(data) == 0:
        return float("nan")
    return (predict_logits(network, data.x).argmax(1) == data.y).float().mean().item()


def _make_optimizer(params, recipe: RecipeConfig):
    if recipe.optimizer is Optimizer.SGD:
        momentum = recipe.momentum_or_betas[0] if recipe.momentum_or_betas else 0.0
        return torch.optim.SGD(params, lr=recipe.lr, momentum=momentum,
                               weight_decay=recipe.weight_decay)
    cls = torch.optim.AdamW if recipe.optimizer is Optimizer.ADAMW else torch.optim.Adam
    return cls(params, lr=recipe.lr, betas=tuple(recipe.momentum_or_betas[:2]),
               weight_decay=recipe.weight_decay)


def mixup_batch(x, y_soft, alpha: float, gen: torch.Generator):
    lam = float(np.random.default_rng(int(torch.randint(2**31, (1,), generator=gen)))
                .beta(alpha, alpha))
    perm = torch.randperm(len(x), generator=gen)
    return lam * x + (1 - lam) * x[perm], lam * y_soft + (1 - lam) * y_soft[perm]


def cutmix_batch(x, y_soft, alpha: float, gen: torch.Generator):
    lam = float(np.random.default_rng(int(torch.randint(2**31, (1,), generator=gen)))
                .beta(alpha, alpha))
    perm = torch.randperm(len(x), generator=gen)
    h, w = x.shape[2:]
    cut_h, cut_w = int(h * math.sqrt(1 - lam)), int(w * math.sqrt(1 - lam))
    cy = int(torch.randint(h, (1,), generator=gen))
    cx = int(torch.randint(w, (1,), generator=gen))
    y0, y1 = max(cy - cut_h // 2, 0), min(cy + cut_h // 2, h)
    x0, x1 = max(cx - cut_w // 2, 0), min(cx + cut_w // 2, w)
    x = x.clone()
    x[:, :, y0:y1, x0:x1] = x[perm][:, :, y0:y1, x0:x1]
    lam = 1 - (y1 - y0) * (x1 - x0) / (h * w)
    return x, lam * y_soft + (1 - lam) * y_soft[perm]


def augment_batch(x, y, recipe: RecipeConfig, batch_index: int, num_classes: int,
                  gen: torch.Generator):
    """Returns (inputs, soft targets) or (inputs, None) when no augmentation applies.

    With both mixup and cutmix configured, even batches use mixup and odd batches cutmix.
    """
    modes = [m for m in ("mixup", "cutmix") if getattr(recipe, m)]
    if not modes:
        return x, None
    mode = modes[batch_index % len(modes)]
    y_soft = F.one_hot(y, num_classes).float()
    if recipe.label_smoothing:
        y_soft = y_soft * (1 - recipe.label_smoothing) + recipe.label_smoothing / num_classes
    if mode == "mixup":
        return mixup_batch(x, y_soft, recipe.mixup, gen)
    return cutmix_batch(x, y_soft, recipe.cutmix, gen)


def soft_cross_entropy(logits, target):
    return -(target * F.log_softmax(logits, dim=1)).sum(1).mean()


def train(model: TaggedModel, data: ImageData, recipe: RecipeConfig, seed: int = 0,
          test_data: ImageData | None = None, split: SplitPlan | None = None,
          dp: DpConfig | None = None) -> TrainedVictim:
    """Train ``model`` in place with ``recipe``; deterministic given ``seed``.

    ``dp`` switches the update to DPSGD (per-example clipping plus Gaussian noise on
    the targeted parameters).
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if data.input_shape != tuple(model.spec.input_shape):
        raise ValueError(f"data shape {data.input_shape} does not match spec "
                         f"{tuple(model.spec.input_shape)}")
    net = model.network
    num_classes = model.spec.num_classes
    order_gen = torch.Generator().manual_seed(seed)
    aug_gen = torch.Generator().manual_seed(seed + 1)
    noise_gen = torch.Generator().manual_seed(dp.seed if dp else 0)
    params = [p for p in net.parameters() if p.requires_grad]
    names = [n for n, p in net.named_parameters() if p.requires_grad]
    opt = _make_optimizer(params, recipe)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=recipe.epochs)
             if recipe.schedule is Schedule.COSINE else None)
    smoothing = recipe.label_smoothing or 0.0

    history = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)  # stochastic depth masks
        for epoch in range(recipe.epochs):
            net.train()
            perm = torch.randperm(len(data), generator=order_gen)
            for b, start in enumerate(range(0, len(data), recipe.batch_size)):
                idx = perm[start:start + recipe.batch_size]
                if len(idx) < 2 and len(data) >= 2:
                    continue
                x, y = data.x[idx], data.y[idx]
                x, soft = augment_batch(x, y, recipe, b, num_classes, aug_gen)
                opt.zero_grad(set_to_none=True)
                if dp is None:
                    logits = net(x)
                    loss = (soft_cross_entropy(logits, soft) if soft is not None
                            else F.cross_entropy(logits, y, label_smoothing=smoothing))
                    if not torch.isfinite(loss):
                        raise TrainingError("loss diverged", epoch)
                    loss.backward()
                else:
                    target = soft if soft is not None else y
                    loss_fn = soft_cross_entropy if soft is not None else F.cross_entropy
                    pe = per_example_gradients(net, x, target, loss_fn)
                    agg = dp_step(pe, dp, model.tags, noise_gen)
                    for n, p in zip(names, params):
                        p.grad = agg[n]
                    if not all(torch.isfinite(g).all() for g in agg.values()):
                        raise TrainingError("gradient diverged", epoch)
                opt.step()
            if sched is not None:
                sched.step()
            tr = accuracy(net, data)
            te = accuracy(net, test_data) if test_data is not None else float("nan")
            history.append((tr, te))
            log.debug("epoch %d train %.3f test %.3f", epoch, tr, te)
    net.eval()
    return TrainedVictim(model, recipe, split, history[-1][0], history[-1][1], history, seed, dp)


def save_checkpoint(victim: TrainedVictim, path: str | Path) -> None:
    spec = victim.model.spec
    torch.save({
        "spec": spec.to_dict(),
        "spec_hash": spec.digest(),
        "recipe": victim.recipe.to_dict(),
        "seed": victim.seed,
        "model_seed": victim.model.seed,
        "dp": victim.dp.to_dict() if victim.dp else None,
        "train_acc": victim.train_acc,
        "test_acc": victim.test_acc,
        "history": victim.history,
        "state_dict": victim.model.network.state_dict(),
    }, path)


def load_checkpoint(path: str | Path) -> TrainedVictim:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    spec = ArchSpec.from_dict(blob["spec"])
    if spec.digest() != blob["spec_hash"]:
        raise ValueError(f"spec hash mismatch in checkpoint {path}")
    model = build(spec, blob["model_seed"])
    model.network.load_state_dict(blob["state_dict"])
    model.network.eval()
    dp = DpConfig.from_dict(blob["dp"]) if blob["dp"] else None
    return TrainedVictim(model, RecipeConfig.from_dict(blob["recipe"]), None,
                         blob["train_acc"], blob["test_acc"],
                         [tuple(h) for h in blob["history"]], blob["seed"], dp)
