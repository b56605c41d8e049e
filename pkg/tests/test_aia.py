import numpy as np
import pytest
import torch
import torch.nn as nn

from archleak import aia
from archleak.arch_lab import build, tiny_ladder_spec, tiny_vit_spec
from archleak.data import synthetic_images


def test_vit_representation_width():
    m = build(tiny_vit_spec(dim=64), 0)
    h = aia.extract_representation(m, torch.rand(3, 3, 16, 16))
    assert h.shape == (3, 64)


def test_representation_deterministic():
    m = build(tiny_ladder_spec(12), 0)
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(aia.extract_representation(m, x), aia.extract_representation(m, x))


def test_bias_free_relu_zero_input():
    class TwoLayer(nn.Module):
        def __init__(self):
            super().__init__()
            self.c1 = nn.Conv2d(3, 4, 3, padding=1, bias=False)
            self.c2 = nn.Conv2d(4, 5, 3, padding=1, bias=False)

        def forward_features(self, x):
            return torch.relu(self.c2(torch.relu(self.c1(x)))).mean((2, 3))

    h = aia.extract_representation(TwoLayer(), torch.zeros(2, 3, 8, 8))
    assert torch.count_nonzero(h) == 0 and h.shape == (2, 5)


def test_missing_penultimate_is_config_error():
    with pytest.raises(aia.AiaConfigError):
        aia.extract_representation(nn.Linear(3, 2), torch.rand(1, 3))


def test_named_layer_extraction():
    m = build(tiny_ladder_spec(12), 0)
    h = aia.extract_representation(m, torch.rand(2, 3, 16, 16), layer="stem")
    assert h.shape == (2, m.spec.stage_channels[0])
    with pytest.raises(aia.AiaConfigError):
        aia.extract_representation(m, torch.rand(1, 3, 16, 16), layer="nope")


def test_separable_attacker_is_perfect():
    g = torch.Generator().manual_seed(0)
    a = torch.randint(0, 3, (90,), generator=g)
    h = torch.nn.functional.one_hot(a, 3).float() * 5 + 0.1 * torch.randn(90, 3, generator=g)
    att = aia.train_attribute_attacker(aia.RepresentationSet(h, a), seed=0)
    assert att.train_accuracy == 1.0


def test_independent_attribute_is_chance():
    g = torch.Generator().manual_seed(1)
    pairs = aia.RepresentationSet(torch.randn(300, 8, generator=g), torch.randint(0, 4, (300,), generator=g))
    att = aia.train_attribute_attacker(pairs, seed=0, epochs=20)
    test_h, test_a = torch.randn(400, 8, generator=g), torch.randint(0, 4, (400,), generator=g)
    acc = float((att.predict(test_h) == test_a.numpy()).mean())
    assert abs(acc - 0.25) <= 0.1


def test_single_class_rejected():
    with pytest.raises(ValueError, match="single"):
        aia.train_attribute_attacker(aia.RepresentationSet(torch.rand(5, 2), torch.zeros(5, dtype=torch.long)))


def test_alphabet_enforced():
    with pytest.raises(ValueError):
        aia.RepresentationSet(torch.rand(3, 2), torch.tensor([0, 1, 5]), alphabet=(0, 1))


def test_csv_roundtrip(tmp_path):
    s = aia.RepresentationSet(torch.rand(4, 3, dtype=torch.float64), torch.tensor([0, 1, 0, 2]), (0, 1, 2))
    s.to_csv(tmp_path / "p.csv", attribute="palette")
    text = (tmp_path / "p.csv").read_text()
    assert text.startswith("# palette alphabet: 0 1 2")
    back = aia.RepresentationSet.from_csv(tmp_path / "p.csv")
    assert back.alphabet == (0, 1, 2) and torch.equal(back.a, s.a)
    assert torch.allclose(back.h, s.h.float())


def test_attack_reports_accuracy_and_f1():
    data = synthetic_images(64, palettes=2, seed=0)
    m = build(tiny_ladder_spec(12), 0)
    res = aia.attribute_attack(m, data.subset(range(32)), data.subset(range(32, 64)), seed=0, epochs=5)
    mets = res.metrics()
    assert {"attack_acc", "macro_f1", "baseline_acc", "baseline_f1"} <= set(mets)
    assert mets["baseline_acc"] == 0.5


def test_attacker_never_sees_images(monkeypatch):
    seen = []
    real = aia.train_attribute_attacker

    def spy(pairs, *a, **k):
        seen.append(type(pairs))
        return real(pairs, *a, **k)

    monkeypatch.setattr(aia, "train_attribute_attacker", spy)
    data = synthetic_images(32, palettes=2, seed=0)
    aia.attribute_attack(build(tiny_ladder_spec(12), 0), data.subset(range(16)), data.subset(range(16, 32)), epochs=2)
    assert seen == [aia.RepresentationSet]
