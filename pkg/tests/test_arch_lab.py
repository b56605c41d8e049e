import json
import math

import pytest
import torch
from hypothesis import given, strategies as st

from archleak.arch_lab import (STEP_CHANGES, Activation, ArchSpec, BlockStyle, Family, ModuleTag,
                               Norm, NormCount, ShapeError, SpecError, StemSpec, build, shrink,
                               spec_diff, spec_for_step, tiny_ladder_spec, tiny_vit_spec,
                               vit_b_spec)


def test_step1_is_resnet50():
    s = spec_for_step(1)
    assert s.stage_depths == (3, 4, 6, 3)
    assert s.stage_channels == (64, 128, 256, 512)
    assert s.stem == StemSpec(7, 2, True)
    assert s.activation is Activation.RELU and s.norm is Norm.BATCH_NORM
    assert s.block_style is BlockStyle.BOTTLENECK


def test_step14_is_convnext_t():
    s = spec_for_step(14)
    assert s.stage_depths == (3, 3, 9, 3)
    assert s.stage_channels == (96, 192, 384, 768)
    assert s.stem == StemSpec(4, 4, False)
    assert s.block_kernel == 7
    assert s.activation is Activation.GELU
    assert s.norm is Norm.LAYER_NORM and s.norm_count is NormCount.REDUCED
    assert s.separate_downsample and s.stochastic_depth and s.layer_scale


@pytest.mark.parametrize("step", range(2, 15))
def test_step_diff_is_local(step):
    assert spec_diff(spec_for_step(step - 1), spec_for_step(step)) == set(STEP_CHANGES[step])


@pytest.mark.parametrize("step", range(2, 15))
def test_shrunk_steps_keep_locality(step):
    changed = spec_diff(tiny_ladder_spec(step - 1), tiny_ladder_spec(step))
    assert changed <= set(STEP_CHANGES[step])


@pytest.mark.parametrize("step", [0, 15])
def test_step_out_of_range(step):
    with pytest.raises(SpecError):
        spec_for_step(step)


def test_spec_roundtrip_and_digest():
    s = spec_for_step(9)
    d = json.loads(json.dumps(s.to_dict()))
    assert ArchSpec.from_dict(d) == s
    assert ArchSpec.from_dict(d).digest() == s.digest()
    assert s.digest() != spec_for_step(10).digest()


def test_from_dict_rejects_unknown():
    d = spec_for_step(1).to_dict()
    d["colour"] = "red"
    with pytest.raises(SpecError):
        ArchSpec.from_dict(d)


def test_shrink_rule():
    s = shrink(spec_for_step(14), width_div=16, depth_div=3)
    assert s.stage_channels == (6, 12, 24, 48)
    assert s.stage_depths == (1, 1, 3, 1)
    with pytest.raises(SpecError):
        shrink(tiny_vit_spec())


@pytest.mark.parametrize("step", range(1, 15))
def test_tag_partition_ladder(step):
    m = build(tiny_ladder_spec(step, input_shape=(3, 32, 32)), seed=0)
    assert set(m.tags) == {n for n, _ in m.network.named_parameters()}
    assert sum(m.param_counts.values()) == m.total_params
    assert m.param_counts[ModuleTag.STEM] > 0 and m.param_counts[ModuleTag.HEAD] > 0


def test_tag_partition_vit():
    m = build(tiny_vit_spec(), seed=0)
    assert sum(m.param_counts.values()) == m.total_params
    assert m.param_counts[ModuleTag.OTHER] == 0
    stem = set(m.names_with([ModuleTag.STEM]))
    assert stem == {"cls_token", "pos_embed", "patch_embed.weight", "patch_embed.bias"}
    for name in m.names_with([ModuleTag.ATTENTION]):
        assert ".attn." in name


def test_vit_b_counts():
    from archleak.arch_lab.build import TinyViT, _vit_tags
    from archleak.arch_lab.build import TaggedModel
    spec = vit_b_spec(num_classes=10, input_shape=(3, 224, 224))
    with torch.device("meta"):
        net = TinyViT(spec)
    m = TaggedModel(net, _vit_tags(net), spec)
    c = m.param_counts
    assert c[ModuleTag.ATTENTION] == 28_348_416
    assert c[ModuleTag.MLP] == 56_669_184
    assert c[ModuleTag.NORM] == 36_864
    assert c[ModuleTag.HEAD] == 9_226
    assert c[ModuleTag.STEM] == 768 * 3 * 16 * 16 + 768 + 768 + 197 * 768


def test_build_deterministic():
    a = build(tiny_ladder_spec(12), seed=3)
    b = build(tiny_ladder_spec(12), seed=3)
    for (na, pa), (nb, pb) in zip(a.network.named_parameters(), b.network.named_parameters()):
        assert na == nb and torch.equal(pa, pb)
    c = build(tiny_ladder_spec(12), seed=4)
    assert not torch.equal(next(a.network.parameters()), next(c.network.parameters()))


def test_build_leaves_global_rng_alone():
    torch.manual_seed(1)
    expected = torch.rand(3)
    torch.manual_seed(1)
    build(tiny_ladder_spec(1), seed=9)
    assert torch.equal(torch.rand(3), expected)


@pytest.mark.parametrize("step,size", [(1, 16), (4, 16), (8, 16), (12, 16), (13, 32), (14, 32)])
def test_forward_shapes(step, size):
    m = build(tiny_ladder_spec(step, input_shape=(3, size, size)), seed=0)
    x = torch.rand(2, 3, size, size)
    assert m(x).shape == (2, 10)
    assert m.network.forward_features(x).shape == (2, m.network.feature_dim)


def test_vit_forward():
    m = build(tiny_vit_spec(dim=64), seed=0)
    x = torch.rand(2, 3, 16, 16)
    assert m(x).shape == (2, 10)
    assert m.network.forward_features(x).shape == (2, 64)


def test_shape_error_mentions_stride():
    spec = tiny_ladder_spec(4, input_shape=(3, 18, 18))
    with pytest.raises(ShapeError, match="stem stride 4"):
        build(spec)
    with pytest.raises(ShapeError, match="downsampling"):
        build(tiny_ladder_spec(13, input_shape=(3, 16, 16)))
    with pytest.raises(ShapeError, match="patch size"):
        build(tiny_vit_spec(input_shape=(3, 18, 18)))


def test_zero_input_bias_free_relu_gives_zero_features():
    spec = tiny_ladder_spec(1)  # ReLU, BatchNorm (eval: identity at init), no conv bias
    m = build(spec, seed=0)
    m.network.eval()
    for mod in m.network.modules():
        if isinstance(mod, torch.nn.BatchNorm2d):
            torch.nn.init.zeros_(mod.bias)
    h = m.network.forward_features(torch.zeros(1, 3, 16, 16))
    assert torch.count_nonzero(h) == 0


@given(st.integers(1, 14), st.integers(1, 4), st.integers(1, 3))
def test_shrink_preserves_flags(step, wd, dd):
    full = spec_for_step(step)
    small = shrink(full, wd, dd)
    assert spec_diff(full, small) <= {"stage_channels", "stage_depths"}
    assert all(d >= 1 for d in small.stage_depths)
    assert all(math.ceil(d / dd) == s for d, s in zip(full.stage_depths, small.stage_depths))
