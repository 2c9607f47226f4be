"""Expert training, multi-expert distillation with the combined
objective, ablation switches, and the KD/DKD logits baselines.

One shared training engine drives every method so that runs with the
same seed consume identical data-order and augmentation randomness;
model initialization draws from separate per-model seeds.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .align import MappingSpec, ProjectionPair, build_mapping
from .backbones import BackboneSpec, ToyBackbone, build_backbone, freeze, state_hash
from .cfa import DimAdapter, SphereSpace, cfa_loss
from .datasets import GradingDataset, augment
from .errors import FrozenExpertError, InputError, NumericError
from .metrics import MetricsReport, compute_metrics
from .sfa import MsLfConfig, StudentFilter, sfa_feature_dim, sfa_loss
from .udd import ScaleSet, udd_loss

METHODS = ("umkd", "kd", "dkd", "supervised")
PROTOCOLS = ("sources-imbalanced", "target-imbalanced")


@dataclass(frozen=True)
class AblationFlags:
    sfa_on: bool = True
    cfa_on: bool = True
    udd_on: bool = True


@dataclass(frozen=True)
class DistillConfig:
    """Every knob of a distillation run."""

    alpha: float = 1.0
    beta: float = 1.0
    scales: ScaleSet = field(default_factory=ScaleSet)
    sfa: MsLfConfig = field(default_factory=MsLfConfig)
    sphere: SphereSpace = field(default_factory=SphereSpace)
    mapping: MappingSpec = field(default_factory=MappingSpec)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    protocol: str = "sources-imbalanced"
    mmd_normalization: str = "paper"
    accumulation: str = "literal"
    sfa_shared_dim: int = 128
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float | None = 5.0
    schedule: str = "cosine"
    epochs: int = 25
    expert_epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    kd_temperature: float = 4.0
    kd_weight: float = 1.0
    dkd_temperature: float = 4.0
    dkd_tckd_weight: float = 1.0
    dkd_nckd_weight: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not (value >= 0 and value == value and abs(value) != float("inf")):
                raise InputError(f"{name} must be finite and non-negative")
        if self.batch_size < 2:
            raise InputError("batch_size must be >= 2 (the MMD term needs a batch)")
        if self.protocol not in PROTOCOLS:
            raise InputError(f"unknown protocol: {self.protocol!r}")
        if self.schedule not in ("cosine", "constant"):
            raise InputError(f"unknown schedule: {self.schedule!r}")


@dataclass
class TrainRunRecord:
    """Everything one training run leaves behind."""

    method: str
    seed: int
    epoch_losses: list[dict]
    val_metrics: list[dict]
    test_report: MetricsReport | None
    config: dict
    wall_clock: float
    expert_hashes_before: list[str] = field(default_factory=list)
    expert_hashes_after: list[str] = field(default_factory=list)

    @property
    def experts_unchanged(self) -> bool:
        return self.expert_hashes_before == self.expert_hashes_after

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "epoch_losses": self.epoch_losses,
            "val_metrics": self.val_metrics,
            "test_report": self.test_report.to_dict() if self.test_report else None,
            "config": self.config,
            "wall_clock": self.wall_clock,
            "expert_hashes_before": self.expert_hashes_before,
            "expert_hashes_after": self.expert_hashes_after,
            "experts_unchanged": self.experts_unchanged,
        }


class ExpertBundle:
    """A frozen expert backbone plus its trainable alignment adapters."""

    def __init__(self, backbone: ToyBackbone):
        self.backbone = freeze(backbone)
        self.spec: BackboneSpec = backbone.spec
        self.weight_hash = state_hash(backbone)
        self.adapters: nn.ModuleDict | None = None

    def init_adapters(self, cfg: DistillConfig, seed: int) -> None:
        """(Re)build projector/decoder pairs and the 1x1 dimension adapter."""
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            sfa_dim = sfa_feature_dim(self.spec.shallow_channels,
                                      self.spec.shallow_resolution, cfg.sfa)
            self.adapters = nn.ModuleDict({
                "sfa_pair": ProjectionPair(sfa_dim, cfg.sfa_shared_dim),
                "cfa_adapter": DimAdapter(self.spec.deep_channels, cfg.sphere.dim),
                "cfa_pair": ProjectionPair(self.spec.deep_channels, cfg.sphere.dim,
                                           with_projector=False),
            })

    def verify_frozen(self) -> None:
        if state_hash(self.backbone) != self.weight_hash:
            raise FrozenExpertError(
                f"expert {self.spec.name} was mutated after freezing"
            )


def _batches(ds: GradingDataset, batch_size: int, generator: torch.Generator,
             policy: str):
    order = torch.randperm(len(ds), generator=generator).tolist()
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) < 2:
            continue  # the MMD term needs at least two samples
        images, labels = [], []
        for idx in chunk:
            image, label = augment(ds.samples[idx], policy, generator)
            images.append(image)
            labels.append(label)
        yield torch.stack(images), torch.tensor(labels, dtype=torch.long)


def predict(model: ToyBackbone, ds: GradingDataset, batch_size: int = 64) -> list[int]:
    was_training = model.training
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(ds), batch_size):
            images = torch.stack(
                [img for img, _ in ds.samples[start:start + batch_size]]
            )
            preds.extend(model(images).argmax(dim=1).tolist())
    if was_training:
        model.train()
    return preds


def evaluate(model: ToyBackbone, ds: GradingDataset,
             batch_size: int = 64) -> MetricsReport:
    preds = predict(model, ds, batch_size)
    labels = [label for _, label in ds.samples]
    return compute_metrics(preds, labels, ds.num_classes)


def total_loss(cls, sfa_val, cfa_val, udd_val, cfg: DistillConfig):
    """Combine the classification, alignment, and distillation components.

    Returns (total, breakdown); disabled ablation flags zero their
    component in both. Breakdown entries are the unweighted post-flag
    component values.
    """
    zero = cls * 0 if torch.is_tensor(cls) else 0.0
    parts = {
        "cls": cls,
        "sfa": sfa_val if cfg.ablation.sfa_on else zero,
        "cfa": cfa_val if cfg.ablation.cfa_on else zero,
        "udd": udd_val if cfg.ablation.udd_on else zero,
    }
    for name, value in parts.items():
        finite = torch.isfinite(value).all() if torch.is_tensor(value) \
            else value == value and abs(value) != float("inf")
        if not finite:
            raise NumericError(f"non-finite loss component: {name}")
    total = (parts["cls"] + cfg.alpha * (parts["sfa"] + parts["cfa"])
             + cfg.beta * parts["udd"])
    return total, parts


def kd_baseline_loss(teacher_logits, student_logits: torch.Tensor,
                     temperature: float) -> torch.Tensor:
    """Soft-target KL divergence between temperature-softened distributions.

    teacher_logits may be one BxC tensor or a list of them (one per
    expert); the result is averaged over batch and experts. The value is
    the raw KL (vanishing as the temperature grows); the training path
    compensates through its kd_weight knob.
    """
    if temperature <= 0:
        raise InputError("temperature must be positive")
    teachers = teacher_logits if isinstance(teacher_logits, (list, tuple)) \
        else [teacher_logits]
    total = student_logits.new_zeros(())
    log_p_s = F.log_softmax(student_logits / temperature, dim=1)
    for t_logits in teachers:
        if t_logits.shape != student_logits.shape:
            raise InputError("teacher and student logits must share shape")
        p_t = F.softmax(t_logits / temperature, dim=1)
        total = total + F.kl_div(log_p_s, p_t, reduction="batchmean")
    return total / len(teachers)


def dkd_baseline_loss(teacher_logits, student_logits: torch.Tensor,
                      target_labels: torch.Tensor, weights=(1.0, 1.0),
                      temperature: float = 4.0) -> torch.Tensor:
    """Decoupled logits baseline: target-class binary KL plus
    non-target-class conditional KL, each temperature-scaled.
    """
    if temperature <= 0:
        raise InputError("temperature must be positive")
    teachers = teacher_logits if isinstance(teacher_logits, (list, tuple)) \
        else [teacher_logits]
    num_classes = student_logits.shape[1]
    if target_labels.min() < 0 or target_labels.max() >= num_classes:
        raise InputError("labels out of range")
    w_target, w_nontarget = weights
    batch = student_logits.shape[0]
    target_mask = F.one_hot(target_labels, num_classes).bool()
    nontarget_mask = ~target_mask

    total = student_logits.new_zeros(())
    for t_logits in teachers:
        p_t = F.softmax(t_logits / temperature, dim=1)
        p_s = F.softmax(student_logits / temperature, dim=1)
        pt_t = (p_t * target_mask).sum(dim=1)
        pt_s = (p_s * target_mask).sum(dim=1)
        binary_t = torch.stack([pt_t, 1 - pt_t], dim=1).clamp_min(1e-12)
        binary_s = torch.stack([pt_s, 1 - pt_s], dim=1).clamp_min(1e-12)
        tckd = (binary_t * (binary_t.log() - binary_s.log())).sum(dim=1).mean()

        # conditional distributions over the C-1 non-target classes
        nt_t = t_logits[nontarget_mask].view(batch, num_classes - 1)
        nt_s = student_logits[nontarget_mask].view(batch, num_classes - 1)
        log_q_t = F.log_softmax(nt_t / temperature, dim=1)
        log_q_s = F.log_softmax(nt_s / temperature, dim=1)
        nckd = (log_q_t.exp() * (log_q_t - log_q_s)).sum(dim=1).mean()

        total = total + (w_target * tckd + w_nontarget * nckd) * temperature**2
    return total / len(teachers)


def _lr_at(cfg: DistillConfig, epoch: int, total_epochs: int) -> float:
    if cfg.schedule == "constant":
        return cfg.lr
    return 0.5 * cfg.lr * (1 + math.cos(math.pi * epoch / max(total_epochs, 1)))


def _fit(model: ToyBackbone, extra_modules: list[nn.Module], loss_fn,
         train_ds: GradingDataset, epochs: int, cfg: DistillConfig, seed: int,
         forbidden_params: list[nn.Parameter] | None = None,
         val_ds: GradingDataset | None = None):
    """Shared SGD loop. loss_fn(images, labels) -> (total, parts dict).

    Data order and augmentation draw from a generator seeded only by
    `seed`, so different methods see identical batches for a given seed.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    for module in extra_modules:
        params.extend(p for p in module.parameters() if p.requires_grad)
    if forbidden_params:
        forbidden = {id(p) for p in forbidden_params}
        overlap = [p for p in params if id(p) in forbidden]
        if overlap:
            raise FrozenExpertError(
                "optimizer parameter set overlaps a frozen expert backbone"
            )
    optimizer = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    data_gen = torch.Generator().manual_seed(seed)
    epoch_losses, val_metrics = [], []
    for epoch in range(epochs):
        lr = _lr_at(cfg, epoch, epochs)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        sums, count = {}, 0
        for images, labels in _batches(train_ds, cfg.batch_size, data_gen, "train"):
            total, parts = loss_fn(images, labels)
            if not torch.isfinite(total):
                raise NumericError(
                    f"training diverged at epoch {epoch}: total loss {total}"
                )
            optimizer.zero_grad()
            total.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            optimizer.step()
            count += 1
            for name, value in {**parts, "total": total}.items():
                if torch.is_tensor(value):
                    value = value.detach().item()
                sums[name] = sums.get(name, 0.0) + value
        epoch_losses.append(
            {"epoch": epoch, **{k: v / max(count, 1) for k, v in sums.items()}}
        )
        if val_ds is not None:
            val_metrics.append(
                {"epoch": epoch, **evaluate(model, val_ds).to_dict()}
            )
    return epoch_losses, val_metrics


def train_expert(spec: BackboneSpec, train_ds: GradingDataset, cfg: DistillConfig,
                 seed: int, val_ds: GradingDataset | None = None
                 ) -> tuple[ExpertBundle, TrainRunRecord]:
    """Train one expert with cross-entropy, then freeze it."""
    start = time.time()
    model = build_backbone(spec, seed)

    def loss_fn(images, labels):
        logits = model(images)
        cls = F.cross_entropy(logits, labels)
        return cls, {"cls": cls}

    epoch_losses, val_metrics = _fit(model, [], loss_fn, train_ds,
                                     cfg.expert_epochs, cfg, seed, val_ds=val_ds)
    bundle = ExpertBundle(model)
    record = TrainRunRecord(
        method="expert", seed=seed, epoch_losses=epoch_losses,
        val_metrics=val_metrics, test_report=None, config=asdict(cfg),
        wall_clock=time.time() - start,
    )
    return bundle, record


def _expert_taps(experts: list[ExpertBundle], images: torch.Tensor):
    taps = []
    with torch.no_grad():
        for bundle in experts:
            taps.append(bundle.backbone.forward_with_taps(images))
    return taps


def distill(experts: list[ExpertBundle], student: ToyBackbone,
            train_ds: GradingDataset, cfg: DistillConfig,
            val_ds: GradingDataset | None = None,
            test_ds: GradingDataset | None = None
            ) -> tuple[ToyBackbone, TrainRunRecord]:
    """Distill the frozen experts into the student with the full objective."""
    if not experts:
        raise InputError("distill needs at least one expert")
    start = time.time()
    for bundle in experts:
        bundle.verify_frozen()
    hashes_before = [b.weight_hash for b in experts]

    for i, bundle in enumerate(experts):
        bundle.init_adapters(cfg, seed=cfg.seed * 1000 + 17 * (i + 1))

    spec = student.spec
    target = cfg.sfa.resolve_target(*spec.shallow_resolution)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed * 1000 + 7)
        student_filter = StudentFilter(spec.shallow_channels,
                                       spec.shallow_resolution, cfg.sfa)
        student_sfa_proj = nn.Linear(
            spec.shallow_channels * target[0] * target[1], cfg.sfa_shared_dim)
        student_cfa_adapter = DimAdapter(spec.deep_channels, cfg.sphere.dim)
        sfa_mapping = build_mapping(cfg.mapping, cfg.sfa_shared_dim)
        cfa_mapping = build_mapping(cfg.mapping, cfg.sphere.dim)

    sfa_pairs = [b.adapters["sfa_pair"] for b in experts]
    cfa_adapters = [b.adapters["cfa_adapter"] for b in experts]
    cfa_pairs = [b.adapters["cfa_pair"] for b in experts]
    extra_modules = [student_filter, student_sfa_proj, student_cfa_adapter,
                     *(b.adapters for b in experts)]
    forbidden = [p for b in experts for p in b.backbone.parameters()]

    flags = cfg.ablation
    zero = torch.zeros(())

    def loss_fn(images, labels):
        expert_taps = _expert_taps(experts, images)
        taps = student.forward_with_taps(images)
        cls = F.cross_entropy(taps.pooled_logits, labels)
        sfa_val = sfa_loss(
            [t.shallow for t in expert_taps], taps.shallow, sfa_pairs,
            student_filter, student_sfa_proj, cfg.sfa, sfa_mapping,
            cfg.mmd_normalization,
        ) if flags.sfa_on else zero
        cfa_val = cfa_loss(
            [t.deep for t in expert_taps], taps.deep, cfa_adapters,
            student_cfa_adapter, cfa_pairs, cfg.sphere, cfa_mapping,
            cfg.mmd_normalization,
        ) if flags.cfa_on else zero
        udd_val = udd_loss(
            [t.logits_map for t in expert_taps], taps.logits_map, cfg.scales,
            cfg.accumulation,
        ) if flags.udd_on else zero
        return total_loss(cls, sfa_val, cfa_val, udd_val, cfg)

    epoch_losses, val_metrics = _fit(
        student, extra_modules, loss_fn, train_ds, cfg.epochs, cfg, cfg.seed,
        forbidden_params=forbidden, val_ds=val_ds,
    )

    for bundle in experts:
        bundle.verify_frozen()
    hashes_after = [state_hash(b.backbone) for b in experts]

    record = TrainRunRecord(
        method="umkd", seed=cfg.seed, epoch_losses=epoch_losses,
        val_metrics=val_metrics,
        test_report=evaluate(student, test_ds) if test_ds is not None else None,
        config=asdict(cfg), wall_clock=time.time() - start,
        expert_hashes_before=hashes_before, expert_hashes_after=hashes_after,
    )
    return student, record


def distill_logits_baseline(method: str, experts: list[ExpertBundle],
                            student: ToyBackbone, train_ds: GradingDataset,
                            cfg: DistillConfig,
                            val_ds: GradingDataset | None = None,
                            test_ds: GradingDataset | None = None
                            ) -> tuple[ToyBackbone, TrainRunRecord]:
    """KD or DKD baseline: cross-entropy plus the logits-matching term."""
    if method not in ("kd", "dkd"):
        raise InputError(f"not a logits baseline: {method!r}")
    if not experts:
        raise InputError("baselines need at least one expert")
    start = time.time()
    for bundle in experts:
        bundle.verify_frozen()
    hashes_before = [b.weight_hash for b in experts]
    forbidden = [p for b in experts for p in b.backbone.parameters()]

    def loss_fn(images, labels):
        teacher_logits = [t.pooled_logits for t in _expert_taps(experts, images)]
        student_logits = student(images)
        cls = F.cross_entropy(student_logits, labels)
        if method == "kd":
            distill_term = cfg.kd_weight * kd_baseline_loss(
                teacher_logits, student_logits, cfg.kd_temperature)
        else:
            distill_term = dkd_baseline_loss(
                teacher_logits, student_logits, labels,
                weights=(cfg.dkd_tckd_weight, cfg.dkd_nckd_weight),
                temperature=cfg.dkd_temperature,
            )
        return cls + distill_term, {"cls": cls, "distill": distill_term}

    epoch_losses, val_metrics = _fit(
        student, [], loss_fn, train_ds, cfg.epochs, cfg, cfg.seed,
        forbidden_params=forbidden, val_ds=val_ds,
    )
    for bundle in experts:
        bundle.verify_frozen()
    record = TrainRunRecord(
        method=method, seed=cfg.seed, epoch_losses=epoch_losses,
        val_metrics=val_metrics,
        test_report=evaluate(student, test_ds) if test_ds is not None else None,
        config=asdict(cfg), wall_clock=time.time() - start,
        expert_hashes_before=hashes_before,
        expert_hashes_after=[state_hash(b.backbone) for b in experts],
    )
    return student, record


def train_supervised(student: ToyBackbone, train_ds: GradingDataset,
                     cfg: DistillConfig, val_ds: GradingDataset | None = None,
                     test_ds: GradingDataset | None = None
                     ) -> tuple[ToyBackbone, TrainRunRecord]:
    """Cross-entropy-only reference run through the same engine."""
    start = time.time()

    def loss_fn(images, labels):
        cls = F.cross_entropy(student(images), labels)
        return cls, {"cls": cls}

    epoch_losses, val_metrics = _fit(student, [], loss_fn, train_ds, cfg.epochs,
                                     cfg, cfg.seed, val_ds=val_ds)
    record = TrainRunRecord(
        method="supervised", seed=cfg.seed, epoch_losses=epoch_losses,
        val_metrics=val_metrics,
        test_report=evaluate(student, test_ds) if test_ds is not None else None,
        config=asdict(cfg), wall_clock=time.time() - start,
    )
    return student, record
