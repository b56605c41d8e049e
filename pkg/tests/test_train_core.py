import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from archleak.arch_lab import build, tiny_ladder_spec, tiny_vit_spec
from archleak.data import synthetic_images
from archleak.defense import DpConfig
from archleak.train_core import (RecipeConfig, RecipeKind, cutmix_batch, default_recipe,
                                 load_checkpoint, make_split, mixup_batch, overfit_recipe,
                                 save_checkpoint, train)


@given(st.integers(8, 500), st.integers(0, 10_000))
def test_split_partition(n, seed):
    plan = make_split(n, seed)
    subsets = [set(s) for s in plan.subsets]
    assert set().union(*subsets) == set(range(n))
    assert sum(map(len, subsets)) == n
    sizes = sorted(map(len, subsets))
    assert sizes[-1] - sizes[0] <= 1


def test_split_examples():
    assert [len(s) for s in make_split(10, 0).subsets] == [3, 3, 2, 2]
    assert [len(s) for s in make_split(60000, 0).subsets] == [15000] * 4
    a, b = make_split(100, 7), make_split(100, 7)
    assert all(np.array_equal(x, y) for x, y in zip(a.subsets, b.subsets))


def test_split_too_small():
    with pytest.raises(ValueError):
        make_split(7, 0)


def test_split_remainder_rule_exhaustive():
    for n in range(8, 40):
        sizes = [len(s) for s in make_split(n, n).subsets]
        assert sizes == [n // 4 + (i < n % 4) for i in range(4)]


def test_default_recipes():
    m = default_recipe(RecipeKind.MEMBERSHIP_VICTIM)
    assert (m.optimizer.value, m.lr, m.weight_decay, m.epochs, m.batch_size) == ("AdamW", 0.001, 0.05, 300, 256)
    assert m.mixup == 0.8 and m.cutmix == 1.0 and m.schedule.value == "CosineAnnealing"
    a = default_recipe("AttributeVictim")
    assert (a.optimizer.value, a.lr, a.weight_decay, a.momentum_or_betas, a.epochs) == ("SGD", 0.01, 0.0005, (0.9,), 100)


@pytest.mark.parametrize("kw", [{"lr": 0}, {"epochs": 0}, {"batch_size": 0}])
def test_recipe_validation(kw):
    with pytest.raises(ValueError):
        RecipeConfig(**kw)


def test_recipe_roundtrip():
    r = default_recipe("MembershipVictim")
    assert RecipeConfig.from_dict(r.to_dict()) == r
    assert r.digest() == RecipeConfig.from_dict(r.to_dict()).digest()


def test_mixup_and_cutmix_keep_label_mass():
    g = torch.Generator().manual_seed(0)
    x = torch.rand(6, 3, 16, 16)
    y = torch.nn.functional.one_hot(torch.arange(6) % 3, 3).float()
    for fn, alpha in ((mixup_batch, 0.8), (cutmix_batch, 1.0)):
        xm, ym = fn(x, y, alpha, g)
        assert xm.shape == x.shape
        assert torch.allclose(ym.sum(1), torch.ones(6))


def test_one_epoch_history_and_determinism():
    data = synthetic_images(24, seed=0)
    r = overfit_recipe(epochs=2, batch_size=8)
    a = train(build(tiny_ladder_spec(12), 0), data, r, seed=5, test_data=data)
    b = train(build(tiny_ladder_spec(12), 0), data, r, seed=5, test_data=data)
    assert len(a.history) == 2
    for pa, pb in zip(a.model.network.parameters(), b.model.network.parameters()):
        assert torch.equal(pa, pb)
    assert 0 <= a.train_acc <= 1


def test_train_with_augmentation_runs():
    data = synthetic_images(16, seed=0)
    r = default_recipe("MembershipVictim").override(epochs=1, batch_size=8)
    v = train(build(tiny_ladder_spec(12), 0), data, r, seed=0)
    assert len(v.history) == 1


def test_train_with_dp_runs_and_records_config():
    data = synthetic_images(16, seed=0)
    v = train(build(tiny_vit_spec(dim=16, depth=1, heads=2), 0), data,
              overfit_recipe(epochs=1, batch_size=8), seed=0, dp=DpConfig(1.0, 0.5))
    assert v.dp.noise_multiplier == 0.5


def test_train_shape_mismatch():
    with pytest.raises(ValueError):
        train(build(tiny_ladder_spec(1), 0), synthetic_images(8, size=32), overfit_recipe(epochs=1))


def test_overfit_recipe_reaches_gap():
    data = synthetic_images(256, signal=0.5, noise=1.0, seed=0)
    tr, te = data.subset(range(64)), data.subset(range(64, 256))
    v = train(build(tiny_ladder_spec(12), 0), tr, overfit_recipe(epochs=30), 0, test_data=te)
    assert v.train_acc - v.test_acc >= 0.3


def test_checkpoint_roundtrip(tmp_path):
    data = synthetic_images(8, seed=0)
    v = train(build(tiny_ladder_spec(12), 1), data, overfit_recipe(epochs=1, batch_size=4), 2)
    save_checkpoint(v, tmp_path / "v.pt")
    w = load_checkpoint(tmp_path / "v.pt")
    for pa, pb in zip(v.model.network.parameters(), w.model.network.parameters()):
        assert torch.equal(pa, pb)
    assert w.recipe == v.recipe and w.train_acc == v.train_acc
    assert len(w.history) == len(v.history)


def test_checkpoint_hash_mismatch(tmp_path):
    data = synthetic_images(8, seed=0)
    v = train(build(tiny_ladder_spec(12), 1), data, overfit_recipe(epochs=1, batch_size=4), 2)
    save_checkpoint(v, tmp_path / "v.pt")
    blob = torch.load(tmp_path / "v.pt", weights_only=False)
    blob["spec_hash"] = "0" * 16
    torch.save(blob, tmp_path / "v.pt")
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(tmp_path / "v.pt")
