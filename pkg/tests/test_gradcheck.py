import pytest
import torch

from umkd import gradcheck
from umkd.align import ProjectionPair
from umkd.backbones import BackboneSpec, build_backbone
from umkd.errors import InputError
from umkd.sfa import MsLfConfig, StudentFilter, sfa_feature_dim, sfa_loss


def test_quadratic_is_exact_for_central_differences():
    x = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
    report = gradcheck.check(lambda: x * x, [x], epsilon=1e-3, threshold=1e-6,
                             name="square")
    assert report.passed
    assert report.max_rel_error <= 1e-9  # central differences are exact here


def test_non_finite_evaluation_identifies_coordinate():
    x = torch.tensor([0.5], dtype=torch.float64, requires_grad=True)

    def fn():
        return torch.log(x - 0.4999).sum()  # x - eps goes negative

    report = gradcheck.check(fn, [x], epsilon=1e-3, name="log")
    assert not report.passed
    assert "input_0[0]" in report.failure


def test_rejects_float32_inputs():
    x = torch.tensor(1.0, requires_grad=True)
    with pytest.raises(InputError):
        gradcheck.check(lambda: x * x, [x])


def test_registry_covers_every_differentiable_op():
    missing = set(gradcheck.REQUIRED_OPS) - set(gradcheck.REGISTRY)
    assert not missing, f"unregistered differentiable ops: {sorted(missing)}"


@pytest.mark.parametrize("name", sorted(gradcheck.REQUIRED_OPS))
def test_each_registered_case_passes(name):
    for seed in range(3):
        report = gradcheck.run_case(name, seed)
        assert report.passed, (
            f"{report.name}: max rel err {report.max_rel_error:.3e} "
            f"(failure: {report.failure})"
        )


def test_udd_cell_example_passes_at_1e4():
    report = gradcheck.run_case("udd_cell_loss", seed=123)
    assert report.passed and report.max_rel_error <= 1e-4


def test_mmd_random_fourier_example_passes_at_1e4():
    report = gradcheck.run_case("mmd_loss/random-fourier", seed=7)
    assert report.passed and report.max_rel_error <= 1e-4


def test_sfa_loss_gradient_through_student_backbone():
    # end-to-end: student shallow tap comes out of a real (double) backbone
    spec = BackboneSpec("grad", (4, 6), num_classes=2,
                        input_resolution=(16, 16), stage_strides=(2, 2))
    torch.manual_seed(0)
    student = build_backbone(spec, seed=0).double().eval()
    config = MsLfConfig(kernel_sizes=(2,), target_resolution=(4, 4))
    filt = StudentFilter(4, (8, 8), config).double()
    dim = sfa_feature_dim(4, (8, 8), config)
    pair = ProjectionPair(dim, 4).double()
    proj = torch.nn.Linear(4 * 4 * 4, 4).double()
    gen = torch.Generator().manual_seed(1)
    batch = torch.randn(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    expert_shallow = torch.randn(2, 4, 8, 8, generator=gen, dtype=torch.float64)

    def fn():
        taps = student.forward_with_taps(batch)
        return sfa_loss([expert_shallow], taps.shallow, [pair], filt, proj,
                        config)

    # ReLU kinks sit near zero for a fresh backbone; a finer step keeps the
    # central differences on one linear piece
    wrt = [student.stages[0][0].weight, student.stages[0][3].weight]
    report = gradcheck.check(fn, wrt, epsilon=1e-5, name="sfa-through-backbone")
    assert report.passed, report.max_rel_error


def test_report_serialization():
    report = gradcheck.run_case("total_loss", seed=0)
    blob = report.to_dict()
    assert blob["passed"] is True
    assert blob["name"].startswith("total_loss")
    assert isinstance(blob["per_input"], list)
