"""Independent central finite-difference oracle for analytic gradients.

Every differentiable loss operation in the package registers a case
factory here; the test suite sweeps the registry over many random
instances and fails if any required operation is missing or disagrees
with the oracle. All checks run in 64-bit precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from . import align, cfa, sfa, trainer, udd
from .errors import InputError

DEFAULT_EPSILON = 1e-3
DEFAULT_THRESHOLD = 1e-4


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    per_input: tuple[tuple[str, float], ...]
    passed: bool
    threshold: float
    failure: str | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_rel_error": self.max_rel_error,
            "per_input": [[label, err] for label, err in self.per_input],
            "passed": self.passed,
            "threshold": self.threshold,
            "failure": self.failure,
        }


def _relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """|a - n| / max(|a|, |n|, 1e-8), relative to the tensor's gradient scale."""
    gap = (analytic - numeric).abs().max()
    scale = torch.maximum(analytic.abs().max(), numeric.abs().max())
    return float(gap / torch.clamp(scale, min=1e-8))


def check(fn: Callable[[], torch.Tensor], wrt: Sequence[torch.Tensor],
          epsilon: float = DEFAULT_EPSILON, threshold: float = DEFAULT_THRESHOLD,
          name: str = "", labels: Sequence[str] | None = None) -> GradCheckReport:
    """Compare autograd gradients of a scalar closure against central differences.

    `wrt` lists the float64 leaf tensors (inputs or module parameters) to
    differentiate; fn is re-evaluated with each coordinate perturbed by
    +/- epsilon in place.
    """
    wrt = list(wrt)
    if labels is None:
        labels = [f"input_{i}" for i in range(len(wrt))]
    for tensor in wrt:
        if tensor.dtype != torch.float64:
            raise InputError("gradient checks require float64 tensors")
        if not tensor.requires_grad:
            raise InputError("all wrt tensors must require grad")

    out = fn()
    if out.dim() != 0:
        raise InputError("fn must return a scalar")
    analytic = torch.autograd.grad(out, wrt)

    per_input = []
    failure = None
    with torch.no_grad():
        for label, tensor, grad in zip(labels, wrt, analytic):
            flat = tensor.data.view(-1)
            numeric = torch.zeros_like(flat)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + epsilon
                f_plus = fn().item()
                flat[k] = orig - epsilon
                f_minus = fn().item()
                flat[k] = orig
                if not (torch.isfinite(torch.tensor(f_plus))
                        and torch.isfinite(torch.tensor(f_minus))):
                    failure = f"non-finite evaluation at {label}[{k}]"
                    break
                numeric[k] = (f_plus - f_minus) / (2 * epsilon)
            if failure:
                break
            per_input.append((label, _relative_error(grad.reshape(-1), numeric)))

    if failure:
        return GradCheckReport(name=name, max_rel_error=float("inf"),
                               per_input=tuple(per_input), passed=False,
                               threshold=threshold, failure=failure)
    max_err = max(err for _, err in per_input)
    return GradCheckReport(name=name, max_rel_error=max_err,
                           per_input=tuple(per_input),
                           passed=max_err <= threshold, threshold=threshold)


# --- case registry -------------------------------------------------------

CaseFactory = Callable[[int], tuple[Callable[[], torch.Tensor], list[torch.Tensor]]]

REGISTRY: dict[str, CaseFactory] = {}

# Inventory of every differentiable operation in the package. The test
# suite fails if any of these lacks a registered case.
REQUIRED_OPS = (
    "mmd_loss/identity",
    "mmd_loss/random-fourier",
    "mmd_loss/mean-embedding",
    "reconstruction_loss",
    "feature_alignment_loss",
    "ms_low_pass",
    "student_filter",
    "sfa_loss",
    "adapt_and_pool",
    "project_to_sphere",
    "cfa_loss",
    "accumulate_logits/literal",
    "accumulate_logits/cell-mean",
    "uncertainty",
    "udd_cell_loss",
    "udd_loss/literal",
    "udd_loss/cell-mean",
    "total_loss",
    "kd_baseline_loss",
    "dkd_baseline_loss",
)


def register(name: str):
    def deco(factory: CaseFactory) -> CaseFactory:
        REGISTRY[name] = factory
        return factory

    return deco


def run_case(name: str, seed: int, epsilon: float = DEFAULT_EPSILON,
             threshold: float = DEFAULT_THRESHOLD) -> GradCheckReport:
    fn, wrt = REGISTRY[name](seed)
    return check(fn, wrt, epsilon=epsilon, threshold=threshold,
                 name=f"{name}[seed={seed}]")


def run_all(seeds: Sequence[int], epsilon: float = DEFAULT_EPSILON,
            threshold: float = DEFAULT_THRESHOLD) -> list[GradCheckReport]:
    return [
        run_case(name, seed, epsilon, threshold)
        for name in sorted(REGISTRY)
        for seed in seeds
    ]


def _gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _randn(shape, gen, scale=1.0):
    t = scale * torch.randn(shape, generator=gen, dtype=torch.float64)
    return t.requires_grad_(True)


@register("mmd_loss/identity")
def _case_mmd_identity(seed):
    gen = _gen(seed)
    e1, e2, s = (_randn((3, 4), gen) for _ in range(3))
    return lambda: align.mmd_loss([e1, e2], s), [e1, e2, s]


@register("mmd_loss/random-fourier")
def _case_mmd_rff(seed):
    gen = _gen(seed)
    e, s = _randn((3, 3), gen), _randn((3, 3), gen)
    mapping = align.build_mapping(
        align.MappingSpec(kind="random-fourier", feature_dim=7, seed=seed,
                          bandwidth=1.5),
        input_dim=3,
    )
    return lambda: align.mmd_loss([e], s, mapping), [e, s]


@register("mmd_loss/mean-embedding")
def _case_mmd_mean(seed):
    gen = _gen(seed)
    e, s = _randn((4, 3), gen), _randn((4, 3), gen)
    return lambda: align.mmd_loss([e], s, normalization="mean-embedding"), [e, s]


@register("reconstruction_loss")
def _case_recon(seed):
    gen = _gen(seed)
    o1, o2, d1, d2 = (_randn((3, 4), gen) for _ in range(4))
    return lambda: align.reconstruction_loss([o1, o2], [d1, d2]), [o1, o2, d1, d2]


@register("feature_alignment_loss")
def _case_fa(seed):
    gen = _gen(seed)
    mmd = (torch.rand((), generator=gen, dtype=torch.float64) + 0.1).requires_grad_(True)
    mse = (torch.rand((), generator=gen, dtype=torch.float64) + 0.1).requires_grad_(True)
    return lambda: align.feature_alignment_loss(mmd, mse), [mmd, mse]


def _functional(shape, gen):
    return torch.randn(shape, generator=gen, dtype=torch.float64)


@register("ms_low_pass")
def _case_mslf(seed):
    gen = _gen(seed)
    feat = _randn((1, 2, 8, 8), gen)
    config = sfa.MsLfConfig(kernel_sizes=(2, 4), target_resolution=(4, 4))
    probe = _functional((1, 4, 4, 4), gen)
    return lambda: (sfa.ms_low_pass(feat, config) * probe).sum(), [feat]


def _student_filter_setup(seed):
    gen = _gen(seed)
    feat = _randn((1, 2, 4, 4), gen)
    config = sfa.MsLfConfig(kernel_sizes=(2,), target_resolution=(2, 2))
    with torch.random.fork_rng():
        torch.manual_seed(seed + 1)
        filt = sfa.StudentFilter(2, (4, 4), config).double()
    return gen, feat, config, filt


@register("student_filter")
def _case_student_filter(seed):
    gen, feat, _, filt = _student_filter_setup(seed)
    probe = _functional((1, 2, 2, 2), gen)
    wrt = [feat, filt.downsample.weight, filt.fuse_depthwise.weight,
           filt.fuse_pointwise.weight, filt.fuse_pointwise.bias]
    fn = lambda: (filt(feat) * probe).sum()
    return fn, wrt


@register("sfa_loss")
def _case_sfa_loss(seed):
    gen, student_feat, config, filt = _student_filter_setup(seed)
    expert_feat = _randn((1, 2, 4, 4), gen)
    dim = sfa.sfa_feature_dim(2, (4, 4), config)
    with torch.random.fork_rng():
        torch.manual_seed(seed + 2)
        pair = align.ProjectionPair(dim, 3).double()
        s_proj = torch.nn.Linear(2 * 2 * 2, 3).double()
    fn = lambda: sfa.sfa_loss([expert_feat], student_feat, [pair], filt,
                              s_proj, config)
    wrt = [expert_feat, student_feat, pair.projector.weight,
           pair.decoder.weight, s_proj.weight]
    return fn, wrt


@register("adapt_and_pool")
def _case_adapt_pool(seed):
    gen = _gen(seed)
    deep = _randn((2, 3, 4, 4), gen)
    with torch.random.fork_rng():
        torch.manual_seed(seed + 1)
        adapter = cfa.DimAdapter(3, 5).double()
    probe = _functional((2, 5), gen)
    fn = lambda: (cfa.adapt_and_pool(deep, adapter) * probe).sum()
    return fn, [deep, adapter.weight, adapter.bias]


@register("project_to_sphere")
def _case_sphere(seed):
    gen = _gen(seed)
    space = cfa.SphereSpace(dim=4)
    v = _randn((3, 4), gen)
    with torch.no_grad():  # keep norms comfortably above epsilon
        v += torch.sign(v) * 0.2
    probe = _functional((3, 4), gen)
    fn = lambda: (cfa.project_to_sphere(v, space) * probe).sum()
    return fn, [v]


@register("cfa_loss")
def _case_cfa_loss(seed):
    gen = _gen(seed)
    space = cfa.SphereSpace(dim=3)
    e_deep = _randn((2, 3, 2, 2), gen)
    s_deep = _randn((2, 2, 2, 2), gen)
    with torch.random.fork_rng():
        torch.manual_seed(seed + 3)
        e_adapter = cfa.DimAdapter(3, 3).double()
        s_adapter = cfa.DimAdapter(2, 3).double()
        pair = align.ProjectionPair(3, 3, with_projector=False).double()
    fn = lambda: cfa.cfa_loss([e_deep], s_deep, [e_adapter], s_adapter,
                              [pair], space)
    wrt = [e_deep, s_deep, e_adapter.weight, s_adapter.weight,
           pair.decoder.weight]
    return fn, wrt


def _accumulate_case(rule):
    def factory(seed):
        gen = _gen(seed)
        logits = _randn((2, 5, 5), gen)
        probe = _functional((2, 4), gen)
        fn = lambda: (udd.accumulate_logits(logits, 2, rule) * probe).sum()
        return fn, [logits]

    return factory


register("accumulate_logits/literal")(_accumulate_case("literal"))
register("accumulate_logits/cell-mean")(_accumulate_case("cell-mean"))


@register("uncertainty")
def _case_uncertainty(seed):
    gen = _gen(seed)
    psi = _randn((4,), gen)
    with torch.no_grad():  # keep the argmax stable under the probe step
        psi[psi.argmax()] += 0.25
    return lambda: udd.uncertainty(psi), [psi]


@register("udd_cell_loss")
def _case_udd_cell(seed):
    gen = _gen(seed)
    psi_t = torch.randn(4, generator=gen, dtype=torch.float64)
    psi_s = _randn((4,), gen)
    return lambda: udd.udd_cell_loss(psi_t, psi_s), [psi_s]


def _udd_loss_case(rule):
    def factory(seed):
        gen = _gen(seed)
        teacher = torch.randn((1, 2, 4, 4), generator=gen, dtype=torch.float64)
        student = _randn((1, 2, 4, 4), gen)
        scales = udd.ScaleSet((1, 2, 4))
        fn = lambda: udd.udd_loss([teacher], student, scales, rule)
        return fn, [student]

    return factory


register("udd_loss/literal")(_udd_loss_case("literal"))
register("udd_loss/cell-mean")(_udd_loss_case("cell-mean"))


@register("total_loss")
def _case_total(seed):
    gen = _gen(seed)
    cls, sfa_v, cfa_v, udd_v = (
        (torch.rand((), generator=gen, dtype=torch.float64) + 0.1).requires_grad_(True)
        for _ in range(4)
    )
    cfg = trainer.DistillConfig(alpha=0.7, beta=0.3)
    fn = lambda: trainer.total_loss(cls, sfa_v, cfa_v, udd_v, cfg)[0]
    return fn, [cls, sfa_v, cfa_v, udd_v]


@register("kd_baseline_loss")
def _case_kd(seed):
    gen = _gen(seed)
    teacher = torch.randn((3, 4), generator=gen, dtype=torch.float64)
    student = _randn((3, 4), gen)
    return lambda: trainer.kd_baseline_loss(teacher, student, temperature=2.5), [student]


@register("dkd_baseline_loss")
def _case_dkd(seed):
    gen = _gen(seed)
    teacher = torch.randn((3, 4), generator=gen, dtype=torch.float64)
    student = _randn((3, 4), gen)
    labels = torch.randint(0, 4, (3,), generator=gen)
    fn = lambda: trainer.dkd_baseline_loss(teacher, student, labels,
                                           weights=(1.0, 1.0), temperature=2.0)
    return fn, [student]
