"""Attribute inference: predict a hidden attribute from the victim's penultimate representation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .arch_lab import TaggedModel
from .data import ImageData
from .evalkit import attack_accuracy, macro_f1
from .mia import fit_mlp


class AiaConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RepresentationPair:
    h: np.ndarray
    a: int


class RepresentationSet:
    """(h, a) pairs stored as an (n, d) matrix and an (n,) attribute vector."""

    def __init__(self, h: torch.Tensor, a: torch.Tensor, alphabet=None):
        if len(h) != len(a):
            raise ValueError("h and a lengths differ")
        if h.ndim != 2:
            raise ValueError("h must be 2-D (examples, features)")
        self.h = h.float()
        self.a = a.long()
        self.alphabet = tuple(alphabet) if alphabet is not None else \
            tuple(int(v) for v in torch.unique(self.a))
        bad = set(int(v) for v in torch.unique(self.a)) - set(self.alphabet)
        if bad:
            raise ValueError(f"attribute values {sorted(bad)} outside alphabet {self.alphabet}")

    def __len__(self):
        return len(self.a)

    def __getitem__(self, i) -> RepresentationPair:
        return RepresentationPair(self.h[i].numpy(), int(self.a[i]))

    def to_csv(self, path: str | Path, attribute: str = "attribute") -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# {attribute} alphabet: {' '.join(map(str, self.alphabet))}\n")
            w = csv.writer(fh)
            w.writerow([f"h{i}" for i in range(self.h.shape[1])] + [attribute])
            for row, a in zip(self.h.tolist(), self.a.tolist()):
                w.writerow(row + [a])

    @classmethod
    def from_csv(cls, path: str | Path) -> "RepresentationSet":
        with open(path) as fh:
            first = fh.readline()
            alphabet = [int(v) for v in first.split(":", 1)[1].split()]
            rows = list(csv.reader(fh))[1:]
        data = np.array(rows, dtype=np.float64)
        return cls(torch.from_numpy(data[:, :-1]), torch.from_numpy(data[:, -1].astype(np.int64)),
                   alphabet)


def _network(victim) -> nn.Module:
    if isinstance(victim, TaggedModel):
        return victim.network
    if hasattr(victim, "model"):  # TrainedVictim
        return victim.model.network
    return victim


@torch.no_grad()
def extract_representation(victim, x: torch.Tensor, layer: str | None = None,
                           batch_size: int = 512) -> torch.Tensor:
    """Pre-classifier features of ``x``.

    By default the post-pooling penultimate activations (``forward_features``).
    ``layer`` names a submodule whose output is used instead, globally averaged
    over any spatial dimensions.
    """
    net = _network(victim)
    net.eval()
    if layer is None:
        if not hasattr(net, "forward_features"):
            raise AiaConfigError(f"{type(net).__name__} has no identifiable penultimate layer; "
                                 "pass layer=<module name>")
        fn = net.forward_features
    else:
        modules = dict(net.named_modules())
        if layer not in modules:
            raise AiaConfigError(f"no module named {layer!r}")
        captured = []

        def fn(xb):
            hook = modules[layer].register_forward_hook(lambda m, i, o: captured.append(o))
            try:
                net(xb)
            finally:
                hook.remove()
            out = captured.pop()
            return out.mean(dim=tuple(range(2, out.ndim))) if out.ndim > 2 else out

    parts = [fn(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(parts).reshape(len(x), -1)


def representation_pairs(victim, data: ImageData, layer: str | None = None,
                         alphabet=None) -> RepresentationSet:
    if data.attr is None:
        raise ValueError("dataset carries no attribute")
    return RepresentationSet(extract_representation(victim, data.x, layer), data.attr, alphabet)


@dataclass
class AttributeAttacker:
    model: nn.Module
    alphabet: tuple
    train_accuracy: float

    @torch.no_grad()
    def predict(self, h: torch.Tensor) -> np.ndarray:
        idx = self.model(h.float()).argmax(1).numpy()
        return np.asarray(self.alphabet)[idx]


def train_attribute_attacker(pairs: RepresentationSet, seed: int = 0, hidden: int = 64,
                             epochs: int = 100, lr: float = 1e-3) -> AttributeAttacker:
    """Two-layer ReLU MLP mapping h to the attribute. Sees only (h, a) pairs."""
    present = torch.unique(pairs.a)
    if len(present) < 2:
        raise ValueError("auxiliary set holds a single attribute class; nothing to learn")
    alphabet = pairs.alphabet
    index = {v: i for i, v in enumerate(alphabet)}
    y = torch.tensor([index[int(v)] for v in pairs.a])
    model = fit_mlp(pairs.h, y, len(alphabet), (hidden,), seed, epochs, lr, layers=2)
    with torch.no_grad():
        acc = (model(pairs.h).argmax(1) == y).float().mean().item()
    return AttributeAttacker(model, alphabet, acc)


@dataclass
class AiaResult:
    predictions: np.ndarray
    labels: np.ndarray
    alphabet: tuple

    @property
    def accuracy(self) -> float:
        return attack_accuracy(self.predictions, self.labels)

    @property
    def macro_f1(self) -> float:
        return macro_f1(self.predictions, self.labels, classes=self.alphabet)

    @property
    def baseline_accuracy(self) -> float:
        """Accuracy of guessing uniformly at random."""
        return 1.0 / len(self.alphabet)

    @property
    def baseline_f1(self) -> float:
        """Expected macro-F1 of a uniform random guess: mean over classes of 2p/(1 + k p)."""
        k = len(self.alphabet)
        freq = np.array([np.mean(self.labels == c) for c in self.alphabet])
        return float(np.mean(2 * freq / k / (freq + 1 / k))) if k else 0.0

    def metrics(self) -> dict[str, float]:
        return {"attack_acc": self.accuracy, "macro_f1": self.macro_f1,
                "baseline_acc": self.baseline_accuracy, "baseline_f1": self.baseline_f1}


def attribute_attack(victim, auxiliary: ImageData, target: ImageData, seed: int = 0,
                     layer: str | None = None, epochs: int = 100) -> AiaResult:
    """Fit the attacker on the auxiliary set's pairs, evaluate on the target set."""
    alphabet = tuple(int(v) for v in torch.unique(torch.cat([auxiliary.attr, target.attr])))
    aux = representation_pairs(victim, auxiliary, layer, alphabet)
    tgt = representation_pairs(victim, target, layer, alphabet)
    attacker = train_attribute_attacker(aux, seed, epochs=epochs)
    return AiaResult(attacker.predict(tgt.h), tgt.a.numpy(), alphabet)
