import pytest
import torch

from umkd.align import ProjectionPair
from umkd.cfa import (DimAdapter, SphereSpace, adapt_and_pool, cfa_loss,
                      project_to_sphere)
from umkd.errors import InputError


def _identity_adapter(dim):
    adapter = DimAdapter(dim, dim)
    with torch.no_grad():
        adapter.weight.copy_(torch.eye(dim))
        adapter.bias.zero_()
    return adapter


def _identity_decoder_pair(dim):
    pair = ProjectionPair(dim, dim, with_projector=False)
    with torch.no_grad():
        pair.decoder.weight.copy_(torch.eye(dim))
        pair.decoder.bias.zero_()
    return pair


def test_sphere_space_validation():
    with pytest.raises(InputError):
        SphereSpace(dim=1)
    with pytest.raises(InputError):
        SphereSpace(dim=4, epsilon=0.0)


class TestAdaptAndPool:
    def test_constant_map_identity_adapter(self):
        deep = torch.full((2, 3, 4, 4), 1.5)
        out = adapt_and_pool(deep, _identity_adapter(3))
        assert torch.allclose(out, torch.full((2, 3), 1.5), atol=1e-6)

    def test_zero_weights_return_bias(self):
        adapter = DimAdapter(3, 5)
        with torch.no_grad():
            adapter.weight.zero_()
        deep = torch.randn(4, 3, 2, 2)
        out = adapt_and_pool(deep, adapter)
        assert torch.allclose(out, adapter.bias.expand(4, 5), atol=1e-7)

    def test_pooling_commutes_with_mapping(self):
        gen = torch.Generator().manual_seed(0)
        adapter = DimAdapter(4, 6)
        deep = torch.randn(3, 4, 5, 5, generator=gen)
        pooled_then_mapped = adapt_and_pool(deep, adapter)
        # map every position, then pool
        per_position = torch.einsum("bchw,dc->bdhw", deep, adapter.weight) \
            + adapter.bias.view(1, -1, 1, 1)
        mapped_then_pooled = per_position.mean(dim=(2, 3))
        rel = (pooled_then_mapped - mapped_then_pooled).abs().max() / \
            mapped_then_pooled.abs().max()
        assert rel <= 1e-6

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            adapt_and_pool(torch.randn(1, 3, 2, 2), DimAdapter(4, 5))


class TestProjectToSphere:
    space = SphereSpace(dim=2)

    def test_three_four_five(self):
        out = project_to_sphere(torch.tensor([[3.0, 4.0]]), self.space)
        assert torch.allclose(out, torch.tensor([[0.6, 0.8]]), atol=1e-7)

    def test_unit_vector_fixed_point(self):
        v = torch.tensor([[0.6, 0.8]])
        assert torch.allclose(project_to_sphere(v, self.space), v, atol=1e-7)

    def test_scale_invariance(self):
        gen = torch.Generator().manual_seed(1)
        v = torch.randn(5, 2, generator=gen)
        a = project_to_sphere(v, self.space)
        b = project_to_sphere(2 * v, self.space)
        assert torch.allclose(a, b, atol=1e-6)

    def test_unit_norms(self):
        gen = torch.Generator().manual_seed(2)
        v = torch.randn(100, 2, generator=gen) + 0.1
        norms = project_to_sphere(v, self.space).norm(dim=-1)
        assert torch.allclose(norms, torch.ones(100), atol=1e-6)

    def test_zero_vector_guard(self):
        out = project_to_sphere(torch.zeros(1, 2), self.space)
        assert torch.isfinite(out).all()
        assert out.norm() <= 1.0

    def test_dim_mismatch(self):
        with pytest.raises(InputError):
            project_to_sphere(torch.randn(1, 3), self.space)


class TestCfaLoss:
    def test_identical_models_with_perfect_decoders_give_zero(self):
        dim = 3
        space = SphereSpace(dim=dim)
        deep = torch.randn(2, dim, 4, 4, generator=torch.Generator().manual_seed(3))
        loss = cfa_loss([deep], deep.clone(), [_identity_adapter(dim)],
                        _identity_adapter(dim), [_identity_decoder_pair(dim)],
                        space)
        assert loss.item() == pytest.approx(0.0, abs=1e-10)

    def test_hand_mmd_value_on_sphere(self):
        # expert embedding (1,0), student (0,1), B=1: MMD = 2
        space = SphereSpace(dim=2)
        expert_deep = torch.zeros(1, 2, 1, 1)
        expert_deep[0, 0] = 2.0   # pooled (2, 0) -> unit (1, 0)
        student_deep = torch.zeros(1, 2, 1, 1)
        student_deep[0, 1] = 3.0  # pooled (0, 3) -> unit (0, 1)
        loss = cfa_loss([expert_deep], student_deep, [_identity_adapter(2)],
                        _identity_adapter(2), [_identity_decoder_pair(2)], space)
        assert loss.item() == pytest.approx(2.0, abs=1e-9)

    def test_invariant_to_positive_rescaling_of_any_model(self):
        # checked in float64 so the 1e-6 band tests the math, not float32 ulps
        gen = torch.Generator().manual_seed(4)
        space = SphereSpace(dim=3)
        torch.manual_seed(5)
        adapters = [DimAdapter(4, 3).double(), DimAdapter(5, 3).double()]
        student_adapter = DimAdapter(2, 3).double()
        pairs = [ProjectionPair(4, 3, with_projector=False).double(),
                 ProjectionPair(5, 3, with_projector=False).double()]
        deeps = [torch.randn(3, 4, 2, 2, generator=gen, dtype=torch.float64),
                 torch.randn(3, 5, 2, 2, generator=gen, dtype=torch.float64)]
        student = torch.randn(3, 2, 2, 2, generator=gen, dtype=torch.float64)

        def loss(e0_scale=1.0, e1_scale=1.0, s_scale=1.0):
            return cfa_loss([e0_scale * deeps[0], e1_scale * deeps[1]],
                            s_scale * student, adapters, student_adapter,
                            pairs, space).item()

        base = loss()
        assert loss(s_scale=7.3) == pytest.approx(base, abs=1e-6)
        assert loss(e0_scale=0.2) == pytest.approx(base, abs=1e-6)
        assert loss(e1_scale=42.0) == pytest.approx(base, abs=1e-6)

    def test_adapter_count_mismatch(self):
        space = SphereSpace(dim=2)
        with pytest.raises(InputError):
            cfa_loss([torch.randn(1, 2, 2, 2)], torch.randn(1, 2, 2, 2),
                     [], _identity_adapter(2), [], space)
