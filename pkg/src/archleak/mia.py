"""Membership inference: shadow-model MLP attack and the likelihood-ratio attack (LiRA).

Both attacks see the victim only through :func:`query_logits` (black-box access).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .arch_lab import TaggedModel
from .data import ImageData
from .evalkit import attack_accuracy, roc, tpr_at_fpr

log = logging.getLogger(__name__)

LOGIT_EPS = 1e-8
VARIANCE_FLOOR = 1e-6


def _net(model) -> nn.Module:
    return model.network if isinstance(model, TaggedModel) else model


@torch.no_grad()
def query_logits(model, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    net = _net(model)
    if isinstance(model, TaggedModel) and tuple(x.shape[1:]) != tuple(model.spec.input_shape):
        raise ValueError(f"example shape {tuple(x.shape[1:])} does not match model input "
                         f"{tuple(model.spec.input_shape)}")
    net.eval()
    return torch.cat([net(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])


@dataclass(frozen=True)
class AttackFeature:
    posteriors: np.ndarray
    correct: bool


class AttackFeatures(Sequence):
    """Per-example softmax posteriors plus a correctness bit, stored column-wise."""

    def __init__(self, posteriors: torch.Tensor, correct: torch.Tensor):
        self.posteriors = posteriors.float()
        self.correct = correct.bool()

    def __len__(self):
        return len(self.correct)

    def __getitem__(self, i):
        return AttackFeature(self.posteriors[i].numpy(), bool(self.correct[i]))

    def matrix(self) -> torch.Tensor:
        return torch.cat([self.posteriors, self.correct.float()[:, None]], dim=1)

    @classmethod
    def concat(cls, parts: list["AttackFeatures"]) -> "AttackFeatures":
        return cls(torch.cat([p.posteriors for p in parts]), torch.cat([p.correct for p in parts]))


def features_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> AttackFeatures:
    post = torch.softmax(logits.double(), dim=1)
    return AttackFeatures(post, post.argmax(1) == labels)


def collect_features(model, examples: torch.Tensor, labels: torch.Tensor) -> AttackFeatures:
    return features_from_logits(query_logits(model, examples), labels)


class AttackMLP(nn.Module):
    def __init__(self, in_dim: int, hidden=(64, 64), out_dim: int = 2):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden[0]), nn.ReLU(),
                                 nn.Linear(hidden[0], hidden[1]), nn.ReLU(),
                                 nn.Linear(hidden[1], out_dim))

    def forward(self, x):
        return self.net(x)


@dataclass
class MembershipClassifier:
    model: AttackMLP
    in_dim: int
    train_accuracy: float
    warnings: list[str] = field(default_factory=list)

    @torch.no_grad()
    def member_probability(self, features: AttackFeatures) -> np.ndarray:
        m = features.matrix()
        if m.shape[1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} features, got {m.shape[1]}")
        return torch.softmax(self.model(m), 1)[:, 1].numpy()

    def predict(self, features: AttackFeatures) -> np.ndarray:
        return (self.member_probability(features) >= 0.5).astype(int)


def fit_mlp(x: torch.Tensor, y: torch.Tensor, out_dim: int, hidden, seed: int,
            epochs: int = 100, lr: float = 1e-3, batch_size: int = 64,
            layers: int = 3) -> nn.Module:
    """Adam-trained ReLU MLP with ``layers`` linear layers (2 or 3)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if layers == 3:
            model = AttackMLP(x.shape[1], hidden, out_dim)
        else:
            model = nn.Sequential(nn.Linear(x.shape[1], hidden[0]), nn.ReLU(),
                                  nn.Linear(hidden[0], out_dim))
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for i in range(0, len(x), batch_size):
            idx = perm[i:i + batch_size]
            opt.zero_grad()
            F.cross_entropy(model(x[idx]), y[idx]).backward()
            opt.step()
    model.eval()
    return model


def train_attack_mlp(features_member: AttackFeatures, features_nonmember: AttackFeatures,
                     seed: int = 0, epochs: int = 100, lr: float = 1e-3,
                     hidden=(64, 64)) -> MembershipClassifier:
    """Three-layer MLP separating member from non-member attack features."""
    n_in, n_out = len(features_member), len(features_nonmember)
    if n_in == 0 or n_out == 0:
        raise ValueError("both member and non-member features are required")
    warnings = []
    if max(n_in, n_out) > 100 * min(n_in, n_out):
        warnings.append(f"class imbalance {n_in}:{n_out} exceeds 100:1")
        log.warning(warnings[-1])
    x = torch.cat([features_member.matrix(), features_nonmember.matrix()])
    y = torch.cat([torch.ones(n_in, dtype=torch.long), torch.zeros(n_out, dtype=torch.long)])
    model = fit_mlp(x, y, 2, hidden, seed, epochs, lr)
    with torch.no_grad():
        acc = (model(x).argmax(1) == y).float().mean().item()
    return MembershipClassifier(model, x.shape[1], acc, warnings)


@dataclass
class MembershipResult:
    scores: np.ndarray
    labels: np.ndarray  # 1 = member
    predictions: np.ndarray

    @property
    def accuracy(self) -> float:
        return attack_accuracy(self.predictions, self.labels)

    @property
    def auc(self) -> float:
        return roc(self.scores, self.labels).auc

    def tpr_at(self, fpr: float) -> float:
        return tpr_at_fpr(roc(self.scores, self.labels), fpr)

    def metrics(self) -> dict[str, float]:
        return {"attack_acc": self.accuracy, "auc": self.auc,
                "tpr_at_0.1%fpr": self.tpr_at(0.001), "tpr_at_1%fpr": self.tpr_at(0.01)}


def network_attack(victim, shadow, victim_in: ImageData, victim_out: ImageData,
                   shadow_in: ImageData, shadow_out: ImageData, seed: int = 0,
                   epochs: int = 100) -> MembershipResult:
    """Train the attack MLP on the shadow's member/non-member split, test on the victim's."""
    clf = train_attack_mlp(collect_features(shadow, shadow_in.x, shadow_in.y),
                           collect_features(shadow, shadow_out.x, shadow_out.y), seed, epochs)
    target = AttackFeatures.concat([collect_features(victim, victim_in.x, victim_in.y),
                                    collect_features(victim, victim_out.x, victim_out.y)])
    labels = np.r_[np.ones(len(victim_in), int), np.zeros(len(victim_out), int)]
    return MembershipResult(clf.member_probability(target), labels, clf.predict(target))


# ---------------------------------------------------------------- LiRA


def scaled_logit(p) -> np.ndarray:
    """log(p / (1 - p)) with p clamped to [eps, 1 - eps]."""
    p = np.clip(np.asarray(p, dtype=np.float64), LOGIT_EPS, 1 - LOGIT_EPS)
    return np.log(p) - np.log1p(-p)


_PHI_MAX = float(scaled_logit(1.0))


def scaled_logit_from_logits(logits: torch.Tensor, labels: torch.Tensor) -> np.ndarray:
    """Same statistic computed stably from logits: z_y - logsumexp(z_{j != y}).

    Clipped to the range the probability clamp allows, so it agrees with
    :func:`scaled_logit` of the softmax wherever that is representable.
    """
    z = logits.double()
    true = z.gather(1, labels[:, None]).squeeze(1)
    others = z.scatter(1, labels[:, None], float("-inf"))
    phi = (true - torch.logsumexp(others, dim=1)).numpy()
    return np.clip(phi, -_PHI_MAX, _PHI_MAX)


def membership_mask(n_models: int, n_examples: int, seed: int = 0) -> np.ndarray:
    """Boolean (N, M) mask with exactly N/2 True entries in every column."""
    if n_models < 2 or n_models % 2:
        raise ValueError(f"number of shadow models must be even and >= 2, got {n_models}")
    rng = np.random.default_rng(seed)
    ranks = np.argsort(rng.random((n_models, n_examples)), axis=0)
    return ranks < n_models // 2


@dataclass
class ShadowEnsemble:
    models: list
    membership_mask: np.ndarray
    pool: ImageData
    seeds: list[int] = field(default_factory=list)
    victims: list = field(default_factory=list, repr=False)
    _phi: np.ndarray | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return len(self.models)

    def shadow_statistics(self) -> np.ndarray:
        """(N, M) scaled logits of every shadow on every pool example (cached)."""
        if self._phi is None:
            self._phi = np.stack([
                scaled_logit_from_logits(query_logits(m, self.pool.x), self.pool.y)
                for m in self.models])
        return self._phi

    def save(self, directory: str | Path) -> None:
        """Directory of shadow checkpoints plus ``mask.npy``."""
        from .train_core import save_checkpoint
        if len(self.victims) != self.N:
            raise ValueError("only ensembles built by lira_build carry checkpoints")
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.save(directory / "mask.npy", self.membership_mask)
        for i, v in enumerate(self.victims):
            save_checkpoint(v, directory / f"shadow_{i:03d}.pt")

    @classmethod
    def load(cls, directory: str | Path, pool: ImageData) -> "ShadowEnsemble":
        from .train_core import load_checkpoint
        directory = Path(directory)
        mask = np.load(directory / "mask.npy")
        victims = [load_checkpoint(directory / f"shadow_{i:03d}.pt") for i in range(len(mask))]
        return cls([v.model for v in victims], mask, pool, [v.seed for v in victims], victims)


def lira_build(model_factory: Callable[[int], TaggedModel], pool: ImageData, N: int = 16,
               seeds: Sequence[int] | int = 0, recipe=None, train_fn=None,
               mask_seed: int | None = None) -> ShadowEnsemble:
    """Train N shadows, shadow n on the pool examples where ``mask[n]`` is True."""
    from .train_core import overfit_recipe, train

    if N < 2 or N % 2:
        raise ValueError(f"N must be even and >= 2, got {N}")
    seeds = list(range(seeds, seeds + N)) if isinstance(seeds, int) else list(seeds)
    if len(seeds) != N:
        raise ValueError("need one seed per shadow model")
    mask = membership_mask(N, len(pool), seeds[0] if mask_seed is None else mask_seed)
    recipe = recipe or overfit_recipe()
    train_fn = train_fn or train
    models = []
    for n, seed in enumerate(seeds):
        victim = train_fn(model_factory(seed), pool.subset(np.nonzero(mask[n])[0]), recipe, seed)
        models.append(victim)
        log.info("shadow %d/%d train acc %.3f", n + 1, N, victim.train_acc)
    return ShadowEnsemble([v.model for v in models], mask, pool, seeds, models)


@dataclass
class LiraScore:
    example_id: int
    mu_in: float
    sigma_in: float
    mu_out: float
    sigma_out: float
    lratio: float
    decision_score: float
    log_lratio: float = 0.0
    global_variance: bool = False


def _gauss_logpdf(x, mu, sigma):
    return -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def score_from_statistics(phi_victim: float, phi_in, phi_out, example_id: int = -1,
                          global_sigma_in: float | None = None,
                          global_sigma_out: float | None = None) -> LiraScore:
    """Fit Gaussians to IN/OUT shadow statistics and score the victim's statistic.

    With fewer than two shadows on a side, that side's spread falls back to the
    supplied global estimate and the score is flagged.
    """
    phi_in, phi_out = np.asarray(phi_in, float), np.asarray(phi_out, float)
    if len(phi_in) == 0 or len(phi_out) == 0:
        raise ValueError("LiRA needs at least one IN and one OUT shadow for each example")
    fallback = len(phi_in) < 2 or len(phi_out) < 2
    mu_in, mu_out = float(phi_in.mean()), float(phi_out.mean())
    s_in = (global_sigma_in if len(phi_in) < 2 and global_sigma_in is not None
            else float(phi_in.std()) if len(phi_in) >= 2 else 1.0)
    s_out = (global_sigma_out if len(phi_out) < 2 and global_sigma_out is not None
             else float(phi_out.std()) if len(phi_out) >= 2 else 1.0)
    s_in, s_out = max(s_in, VARIANCE_FLOOR), max(s_out, VARIANCE_FLOOR)
    log_lr = float(_gauss_logpdf(phi_victim, mu_in, s_in) - _gauss_logpdf(phi_victim, mu_out, s_out))
    lratio = math.exp(min(log_lr, 700.0))
    return LiraScore(example_id, mu_in, s_in, mu_out, s_out, lratio, _sigmoid(log_lr),
                     log_lr, fallback)


def lira_scores(ensemble: ShadowEnsemble, victim, indices=None) -> list[LiraScore]:
    phi = ensemble.shadow_statistics()
    mask = ensemble.membership_mask
    pool = ensemble.pool
    idx = np.arange(len(pool)) if indices is None else np.asarray(indices)
    phi_v = scaled_logit_from_logits(query_logits(victim, pool.x[idx]), pool.y[idx])
    g_in = float(np.std(phi[mask])) if mask.any() else 1.0
    g_out = float(np.std(phi[~mask])) if (~mask).any() else 1.0
    return [score_from_statistics(phi_v[j], phi[mask[:, m], m], phi[~mask[:, m], m], int(m),
                                  g_in, g_out)
            for j, m in enumerate(idx)]


def lira_score(ensemble: ShadowEnsemble, victim, index: int) -> LiraScore:
    return lira_scores(ensemble, victim, [index])[0]


def lira_attack(ensemble: ShadowEnsemble, victim, victim_members: np.ndarray) -> MembershipResult:
    """Score every pool example; ``victim_members`` marks the victim's training examples."""
    scores = lira_scores(ensemble, victim)
    s = np.array([sc.log_lratio for sc in scores])
    labels = np.asarray(victim_members).astype(int)
    return MembershipResult(s, labels, (s > 0).astype(int))


def dump_scores(scores: list[LiraScore], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["example_id", "mu_in", "sigma_in", "mu_out", "sigma_out", "lratio",
                    "decision_score", "global_variance"])
        for s in scores:
            w.writerow([s.example_id, s.mu_in, s.sigma_in, s.mu_out, s.sigma_out, s.lratio,
                        s.decision_score, int(s.global_variance)])


def dump_features(features: AttackFeatures, path: str | Path, ids=None) -> None:
    ids = range(len(features)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        c = features.posteriors.shape[1]
        w.writerow(["example_id"] + [f"p{i}" for i in range(c)] + ["correct"])
        for i, row, ok in zip(ids, features.posteriors.tolist(), features.correct.tolist()):
            w.writerow([i] + row + [int(ok)])
