import pytest
import torch

from umkd.backbones import (BackboneSpec, ToyBackbone, build_backbone,
                            forward_with_taps, load_checkpoint,
                            logits_map_from_features, save_checkpoint,
                            state_hash)
from umkd.errors import InputError

SPEC = BackboneSpec("tiny", (8, 12, 16, 24), num_classes=4,
                    input_resolution=(32, 32))


def test_spec_validation():
    with pytest.raises(InputError):
        BackboneSpec("bad", (), 4, (32, 32))
    with pytest.raises(InputError):
        BackboneSpec("bad", (8,), 1, (32, 32))
    with pytest.raises(InputError):
        BackboneSpec("bad", (8, 8), 4, (30, 30), stage_strides=(2, 2))
    with pytest.raises(InputError):
        BackboneSpec("bad", (8, 8), 4, (32, 32), stage_strides=(2,))
    with pytest.raises(InputError):
        BackboneSpec("bad", (8, 8), 4, (32, 32), shallow_stage=3)


def test_spec_geometry():
    assert SPEC.downsampling_factor == 8
    assert SPEC.shallow_resolution == (16, 16)
    assert SPEC.deep_resolution == (4, 4)
    assert SPEC.shallow_channels == 8
    assert SPEC.deep_channels == 24


def test_taps_shapes_follow_spec():
    model = build_backbone(SPEC, seed=0)
    taps = forward_with_taps(model, torch.randn(2, 3, 32, 32))
    assert taps.shallow.shape == (2, 8, 16, 16)
    assert taps.deep.shape == (2, 24, 4, 4)
    assert taps.logits_map.shape == (2, 4, 4, 4)
    assert taps.pooled_logits.shape == (2, 4)
    assert taps.class_count == 4


def test_zero_weight_head_gives_zero_logits():
    model = build_backbone(SPEC, seed=0)
    with torch.no_grad():
        model.classifier.weight.zero_()
        model.classifier.bias.zero_()
    taps = forward_with_taps(model, torch.randn(3, 3, 32, 32))
    assert torch.equal(taps.logits_map, torch.zeros_like(taps.logits_map))
    assert torch.equal(taps.pooled_logits, torch.zeros_like(taps.pooled_logits))


def test_eval_mode_forward_is_bitwise_deterministic():
    model = build_backbone(SPEC, seed=1).eval()
    batch = torch.randn(4, 3, 32, 32, generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        first = forward_with_taps(model, batch)
        second = forward_with_taps(model, batch)
    assert torch.equal(first.logits_map, second.logits_map)
    assert torch.equal(first.shallow, second.shallow)
    assert torch.equal(first.deep, second.deep)


def test_pooled_logits_equal_spatial_mean_of_logits_map():
    # direct mean over the returned logits map is the oracle
    model = build_backbone(SPEC, seed=3).eval()
    taps = forward_with_taps(model, torch.randn(4, 3, 32, 32))
    oracle = taps.logits_map.mean(dim=(2, 3))
    assert torch.allclose(taps.pooled_logits, oracle, rtol=1e-6, atol=1e-7)


def test_pooled_mean_linearity_over_random_models():
    gen = torch.Generator().manual_seed(7)
    for trial in range(100):
        widths = tuple(int(torch.randint(4, 12, (1,), generator=gen)) for _ in range(2))
        spec = BackboneSpec(f"m{trial}", widths, num_classes=3,
                            input_resolution=(16, 16), stage_strides=(2, 2))
        model = build_backbone(spec, seed=trial).eval()
        batch = torch.randn(2, 3, 16, 16, generator=gen)
        taps = forward_with_taps(model, batch)
        pooled_deep = taps.deep.mean(dim=(2, 3))
        via_classifier = model.classifier(pooled_deep)
        rel = (taps.pooled_logits - via_classifier).abs().max() / \
            via_classifier.abs().max().clamp_min(1e-8)
        assert rel <= 1e-6


def test_logits_map_constant_feature_affine():
    deep = torch.ones(1, 1, 3, 3)
    out = logits_map_from_features(deep, torch.tensor([[2.0]]), torch.tensor([0.5]))
    assert torch.allclose(out, torch.full((1, 1, 3, 3), 2.5))


def test_logits_map_identity_classifier():
    deep = torch.randn(2, 3, 4, 4)
    out = logits_map_from_features(deep, torch.eye(3), torch.zeros(3))
    assert torch.allclose(out, deep, atol=1e-7)


def test_logits_map_mean_commutes_with_classifier():
    deep = torch.randn(2, 5, 4, 4)
    weight, bias = torch.randn(3, 5), torch.randn(3)
    out = logits_map_from_features(deep, weight, bias)
    lhs = out.mean(dim=(2, 3))
    rhs = deep.mean(dim=(2, 3)) @ weight.T + bias
    assert torch.allclose(lhs, rhs, rtol=1e-6, atol=1e-7)


def test_logits_map_dimension_mismatch():
    with pytest.raises(InputError):
        logits_map_from_features(torch.randn(1, 4, 2, 2), torch.randn(3, 5),
                                 torch.randn(3))


def test_forward_rejects_wrong_resolution():
    model = build_backbone(SPEC, seed=0)
    with pytest.raises(InputError):
        forward_with_taps(model, torch.randn(1, 3, 16, 16))


def test_seed_sensitivity_and_hash():
    a = build_backbone(SPEC, seed=10)
    b = build_backbone(SPEC, seed=11)
    assert state_hash(a) != state_hash(b)
    assert state_hash(a) == state_hash(build_backbone(SPEC, seed=10))


def test_checkpoint_roundtrip(tmp_path):
    model = build_backbone(SPEC, seed=5)
    path = tmp_path / "model.pt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == SPEC
    assert state_hash(loaded) == state_hash(model)


def test_checkpoint_rejects_unknown_version(tmp_path):
    path = tmp_path / "bad.pt"
    torch.save({"format_version": 99, "spec": {}, "state_dict": {}}, path)
    with pytest.raises(InputError):
        load_checkpoint(path)
