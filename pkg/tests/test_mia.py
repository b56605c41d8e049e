import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, strategies as st

from archleak import mia
from archleak.arch_lab import build, tiny_vit_spec
from archleak.data import synthetic_images
from archleak.train_core import overfit_recipe


class Const(nn.Module):
    def __init__(self, logits):
        super().__init__()
        self.logits = torch.tensor(logits, dtype=torch.float32)

    def forward(self, x):
        return self.logits.expand(len(x), -1)


def test_uniform_logits_give_uniform_posteriors():
    f = mia.collect_features(Const([0.0] * 4), torch.rand(3, 3, 4, 4), torch.tensor([0, 1, 2]))
    assert np.allclose(f.posteriors.numpy(), 0.25)
    assert f.matrix().shape == (3, 5)  # num_classes + 1


def test_softmax_closed_form_and_correct_flag():
    f = mia.collect_features(Const([math.log(2), 0, 0, 0]), torch.rand(2, 1), torch.tensor([0, 1]))
    assert f[0].posteriors == pytest.approx([0.4, 0.2, 0.2, 0.2], abs=1e-6)
    assert f[0].correct and not f[1].correct
    assert abs(f.posteriors.sum(1) - 1).max() < 1e-6


def test_shape_mismatch_raises():
    m = build(tiny_vit_spec(dim=16, depth=1, heads=2), 0)
    with pytest.raises(ValueError):
        mia.collect_features(m, torch.rand(2, 3, 8, 8), torch.tensor([0, 1]))


def _feats(posteriors, correct):
    return mia.AttackFeatures(torch.as_tensor(posteriors, dtype=torch.float32),
                              torch.as_tensor(correct))


def test_attack_mlp_separable():
    members = _feats(np.zeros((40, 3)), np.zeros(40, bool))
    non = _feats(np.ones((40, 3)), np.ones(40, bool))
    clf = mia.train_attack_mlp(members, non, seed=0)
    assert clf.train_accuracy == 1.0
    assert clf.in_dim == 4


def test_attack_mlp_null():
    g = torch.Generator().manual_seed(0)

    def sample(n):
        p = torch.softmax(torch.randn(n, 5, generator=g), 1)
        return mia.AttackFeatures(p, torch.rand(n, generator=g) > 0.5)

    clf = mia.train_attack_mlp(sample(200), sample(200), seed=0, epochs=30)
    a, b = sample(500), sample(500)
    preds = np.r_[clf.predict(a), clf.predict(b)]
    labels = np.r_[np.ones(500), np.zeros(500)]
    assert abs((preds == labels).mean() - 0.5) <= 0.1


def test_attack_mlp_imbalance_warning():
    members = _feats(np.random.rand(202, 3), np.zeros(202, bool))
    non = _feats(np.random.rand(2, 3), np.zeros(2, bool))
    clf = mia.train_attack_mlp(members, non, seed=0, epochs=1)
    assert clf.warnings and "100:1" in clf.warnings[0]


def test_attack_mlp_deterministic():
    a = _feats(np.random.rand(20, 3), np.zeros(20, bool))
    b = _feats(np.random.rand(20, 3), np.ones(20, bool))
    p1 = mia.train_attack_mlp(a, b, seed=4, epochs=5).member_probability(a)
    p2 = mia.train_attack_mlp(a, b, seed=4, epochs=5).member_probability(a)
    assert np.array_equal(p1, p2)


def test_attack_mlp_needs_both_classes():
    with pytest.raises(ValueError):
        mia.train_attack_mlp(_feats(np.zeros((0, 3)), np.zeros(0, bool)),
                             _feats(np.zeros((3, 3)), np.zeros(3, bool)))


@pytest.mark.parametrize("n,m", [(2, 4), (16, 256), (4, 7)])
def test_membership_mask_balanced(n, m):
    mask = mia.membership_mask(n, m, seed=1)
    assert mask.shape == (n, m)
    assert np.all(mask.sum(0) == n // 2)
    assert np.array_equal(mask, mia.membership_mask(n, m, seed=1))


@pytest.mark.parametrize("n", [0, 1, 3, 15])
def test_membership_mask_rejects_odd(n):
    with pytest.raises(ValueError):
        mia.membership_mask(n, 4)


def test_lira_build_rejects_odd():
    with pytest.raises(ValueError):
        mia.lira_build(lambda s: None, synthetic_images(8), N=3)


def test_scaled_logit_clamp_finite():
    phi = mia.scaled_logit([0.0, 1.0, 0.5])
    assert np.all(np.isfinite(phi))
    assert phi[2] == 0.0
    assert phi[1] == pytest.approx(math.log((1 - 1e-8) / 1e-8))


@given(st.lists(st.floats(-30, 30), min_size=3, max_size=3), st.integers(0, 2))
def test_stable_logit_form_matches_probability_form(z, y):
    logits = torch.tensor([z], dtype=torch.float64)
    p = torch.softmax(logits, 1)[0, y].item()
    stable = mia.scaled_logit_from_logits(logits, torch.tensor([y]))[0]
    direct = mia.scaled_logit(p)
    if 1e-6 < p < 1 - 1e-6:
        assert stable == pytest.approx(direct, abs=1e-6)
    assert abs(stable) <= mia.scaled_logit(1.0) + 1e-9


def test_identical_gaussians_score_half():
    s = mia.score_from_statistics(0.3, [0.0, 1.0, 2.0], [0.0, 1.0, 2.0])
    assert s.lratio == pytest.approx(1.0) and s.decision_score == pytest.approx(0.5)


def test_far_in_gaussian_is_confident():
    s = mia.score_from_statistics(10.0, [9.0, 10.0, 11.0], [-1.0, 0.0, 1.0])
    assert s.decision_score > 0.99


def test_variance_floor():
    s = mia.score_from_statistics(1.0, [1.0, 1.0], [0.0, 0.0])
    assert s.sigma_in >= mia.VARIANCE_FLOOR and s.sigma_out >= mia.VARIANCE_FLOOR


def test_global_variance_fallback_flagged():
    s = mia.score_from_statistics(1.0, [1.0], [0.0, 0.5], global_sigma_in=0.7)
    assert s.global_variance and s.sigma_in == 0.7
    with pytest.raises(ValueError):
        mia.score_from_statistics(1.0, [], [0.0])


@given(st.floats(-5, 5), st.floats(0.01, 5))
def test_decision_monotone_in_victim_statistic(phi, step):
    ins, outs = [1.0, 2.0, 3.0], [-2.0, -1.0, 0.0]
    a = mia.score_from_statistics(phi, ins, outs)
    b = mia.score_from_statistics(phi + step, ins, outs)
    assert b.decision_score >= a.decision_score


def test_lira_pipeline_small(tmp_path):
    pool = synthetic_images(32, seed=0)
    factory = lambda s: build(tiny_vit_spec(dim=16, depth=1, heads=2), s)
    ens = mia.lira_build(factory, pool, N=4, seeds=0, recipe=overfit_recipe(epochs=2, batch_size=8))
    assert np.all(ens.membership_mask.sum(0) == 2)
    scores = mia.lira_scores(ens, factory(99))
    assert len(scores) == 32
    assert all(0.0 <= s.decision_score <= 1.0 for s in scores)
    mia.dump_scores(scores, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().startswith("example_id,mu_in")
    ens.save(tmp_path / "ens")
    back = mia.ShadowEnsemble.load(tmp_path / "ens", pool)
    assert np.allclose(back.shadow_statistics(), ens.shadow_statistics())


def test_both_attacks_use_the_query_interface(monkeypatch):
    calls = []
    real = mia.query_logits

    def spy(model, x, batch_size=512):
        calls.append(len(x))
        return real(model, x, batch_size)

    monkeypatch.setattr(mia, "query_logits", spy)
    pool = synthetic_images(16, seed=0)
    m = build(tiny_vit_spec(dim=16, depth=1, heads=2), 0)
    mia.collect_features(m, pool.x, pool.y)
    ens = mia.ShadowEnsemble([m, m], np.array([[True] * 16, [False] * 16]), pool)
    mia.lira_scores(ens, m)
    assert calls == [16, 16, 16, 16]
