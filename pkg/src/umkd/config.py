"""Experiment configuration: YAML schema, validation, and resolution.

Every section is validated against an explicit key set; unknown keys are
rejected before any compute starts. `resolve()` returns the fully
defaulted dictionary that run directories echo byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .align import MappingSpec
from .backbones import BackboneSpec
from .cfa import SphereSpace
from .datasets import SplitConfig
from .errors import SchemaError
from .sfa import MsLfConfig
from .trainer import AblationFlags, DistillConfig, METHODS, PROTOCOLS
from .udd import ScaleSet

_RUN_KEYS = {"name", "output_dir", "seeds", "method", "deterministic"}
_DATASET_KEYS = {"kind", "root", "num_classes", "resolution", "noise_level",
                 "seed", "imbalanced_counts", "balanced_counts", "split"}
_SPLIT_KEYS = {"ratios", "seed", "stratified"}
_MODELS_KEYS = {"experts", "student"}
_BACKBONE_KEYS = {"name", "stage_channels", "num_classes", "input_resolution",
                  "stage_strides", "shallow_stage"}
_DISTILL_KEYS = {
    "alpha", "beta", "scales", "sfa", "sphere", "mapping", "ablation",
    "protocol", "mmd_normalization", "accumulation", "sfa_shared_dim",
    "lr", "momentum", "weight_decay", "schedule", "epochs", "expert_epochs",
    "batch_size", "kd_temperature", "kd_weight", "dkd_temperature",
    "dkd_tckd_weight", "dkd_nckd_weight",
}
_SFA_KEYS = {"kernel_sizes", "strides", "target_resolution"}
_SPHERE_KEYS = {"dim", "epsilon"}
_MAPPING_KEYS = {"kind", "feature_dim", "seed", "bandwidth"}
_ABLATION_KEYS = {"sfa_on", "cfa_on", "udd_on"}


def _require_keys(section: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise SchemaError(f"unknown keys in {where}: {', '.join(unknown)}")


def _tuple_or_none(value):
    return tuple(value) if value is not None else None


@dataclass
class ExperimentConfig:
    name: str
    output_dir: str
    seeds: tuple[int, ...]
    method: str
    deterministic: bool
    dataset: dict
    split: SplitConfig
    expert_specs: tuple[BackboneSpec, ...]
    student_spec: BackboneSpec
    distill_template: dict  # DistillConfig kwargs minus the per-run seed

    def distill_config(self, seed: int, ablation: AblationFlags | None = None
                       ) -> DistillConfig:
        kwargs = dict(self.distill_template)
        if ablation is not None:
            kwargs["ablation"] = ablation
        return DistillConfig(seed=seed, **kwargs)


def _parse_backbone(section: dict, where: str) -> BackboneSpec:
    if not isinstance(section, dict):
        raise SchemaError(f"{where} must be a mapping")
    _require_keys(section, _BACKBONE_KEYS, where)
    for key in ("name", "stage_channels", "num_classes", "input_resolution"):
        if key not in section:
            raise SchemaError(f"{where} is missing required key: {key}")
    try:
        return BackboneSpec(
            name=section["name"],
            stage_channels=tuple(section["stage_channels"]),
            num_classes=int(section["num_classes"]),
            input_resolution=tuple(section["input_resolution"]),
            stage_strides=_tuple_or_none(section.get("stage_strides")),
            shallow_stage=int(section.get("shallow_stage", 1)),
        )
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise SchemaError("config root must be a mapping")
    _require_keys(raw, {"run", "dataset", "models", "distill"}, "config root")
    for key in ("run", "dataset", "models"):
        if key not in raw:
            raise SchemaError(f"config is missing required section: {key}")

    run = raw["run"]
    _require_keys(run, _RUN_KEYS, "run")
    method = run.get("method", "umkd")
    if method not in METHODS:
        raise SchemaError(f"run.method must be one of {METHODS}, got {method!r}")
    seeds = tuple(int(s) for s in run.get("seeds", [0]))
    if not seeds:
        raise SchemaError("run.seeds must be non-empty")

    dataset = dict(raw["dataset"])
    _require_keys(dataset, _DATASET_KEYS, "dataset")
    kind = dataset.get("kind", "synthetic")
    if kind not in ("synthetic", "image-folder"):
        raise SchemaError(f"dataset.kind must be synthetic or image-folder, got {kind!r}")
    if kind == "image-folder" and "root" not in dataset:
        raise SchemaError("dataset.kind=image-folder requires dataset.root")
    for key in ("imbalanced_counts", "balanced_counts"):
        if key not in dataset:
            raise SchemaError(f"dataset is missing required key: {key}")
    split_raw = dataset.get("split") or {}
    _require_keys(split_raw, _SPLIT_KEYS, "dataset.split")
    try:
        split = SplitConfig(
            ratios=tuple(split_raw.get("ratios", (0.8, 0.1, 0.1))),
            seed=int(split_raw.get("seed", 0)),
            stratified=bool(split_raw.get("stratified", True)),
        )
    except ValueError as exc:
        raise SchemaError(f"dataset.split: {exc}") from exc

    models = raw["models"]
    _require_keys(models, _MODELS_KEYS, "models")
    experts_raw = models.get("experts")
    if not experts_raw:
        raise SchemaError("models.experts must list at least one expert")
    expert_specs = tuple(
        _parse_backbone(e, f"models.experts[{i}]") for i, e in enumerate(experts_raw)
    )
    if "student" not in models:
        raise SchemaError("models.student is required")
    student_spec = _parse_backbone(models["student"], "models.student")

    distill_raw = dict(raw.get("distill") or {})
    _require_keys(distill_raw, _DISTILL_KEYS, "distill")
    template: dict = {}
    try:
        if "scales" in distill_raw:
            template["scales"] = ScaleSet(tuple(distill_raw.pop("scales")))
        if "sfa" in distill_raw:
            sfa_raw = distill_raw.pop("sfa")
            _require_keys(sfa_raw, _SFA_KEYS, "distill.sfa")
            template["sfa"] = MsLfConfig(
                kernel_sizes=tuple(sfa_raw.get("kernel_sizes", (2, 4, 8))),
                strides=_tuple_or_none(sfa_raw.get("strides")),
                target_resolution=_tuple_or_none(sfa_raw.get("target_resolution")),
            )
        if "sphere" in distill_raw:
            sphere_raw = distill_raw.pop("sphere")
            _require_keys(sphere_raw, _SPHERE_KEYS, "distill.sphere")
            template["sphere"] = SphereSpace(**sphere_raw)
        if "mapping" in distill_raw:
            mapping_raw = distill_raw.pop("mapping")
            _require_keys(mapping_raw, _MAPPING_KEYS, "distill.mapping")
            template["mapping"] = MappingSpec(**mapping_raw)
        if "ablation" in distill_raw:
            ablation_raw = distill_raw.pop("ablation")
            _require_keys(ablation_raw, _ABLATION_KEYS, "distill.ablation")
            template["ablation"] = AblationFlags(**ablation_raw)
        template.update(distill_raw)
        probe = DistillConfig(seed=0, **template)  # validate eagerly
        if probe.protocol not in PROTOCOLS:
            raise SchemaError(f"unknown protocol {probe.protocol!r}")
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"distill: {exc}") from exc

    return ExperimentConfig(
        name=str(run.get("name", "experiment")),
        output_dir=str(run.get("output_dir", "runs")),
        seeds=seeds,
        method=method,
        deterministic=bool(run.get("deterministic", False)),
        dataset=dataset,
        split=split,
        expert_specs=expert_specs,
        student_spec=student_spec,
        distill_template=template,
    )


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SchemaError(f"config is not valid YAML: {exc}") from exc
    return parse_config(raw)


def _spec_dict(spec: BackboneSpec) -> dict:
    return {
        "name": spec.name,
        "stage_channels": list(spec.stage_channels),
        "num_classes": spec.num_classes,
        "input_resolution": list(spec.input_resolution),
        "stage_strides": list(spec.stage_strides),
        "shallow_stage": spec.shallow_stage,
    }


def resolve(cfg: ExperimentConfig) -> dict:
    """Fully defaulted, JSON/YAML-friendly view of the configuration."""
    probe = cfg.distill_config(seed=0)
    return {
        "run": {
            "name": cfg.name,
            "output_dir": cfg.output_dir,
            "seeds": list(cfg.seeds),
            "method": cfg.method,
            "deterministic": cfg.deterministic,
        },
        "dataset": {
            "kind": cfg.dataset.get("kind", "synthetic"),
            "root": cfg.dataset.get("root"),
            "num_classes": cfg.dataset.get("num_classes", 4),
            "resolution": list(cfg.dataset.get("resolution", (32, 32))),
            "noise_level": cfg.dataset.get("noise_level", 0.3),
            "seed": cfg.dataset.get("seed", 0),
            "imbalanced_counts": list(cfg.dataset["imbalanced_counts"]),
            "balanced_counts": list(cfg.dataset["balanced_counts"]),
            "split": {
                "ratios": list(cfg.split.ratios),
                "seed": cfg.split.seed,
                "stratified": cfg.split.stratified,
            },
        },
        "models": {
            "experts": [_spec_dict(s) for s in cfg.expert_specs],
            "student": _spec_dict(cfg.student_spec),
        },
        "distill": {
            "alpha": probe.alpha,
            "beta": probe.beta,
            "scales": list(probe.scales.scales),
            "sfa": {
                "kernel_sizes": list(probe.sfa.kernel_sizes),
                "strides": list(probe.sfa.strides),
                "target_resolution": (
                    list(probe.sfa.target_resolution)
                    if probe.sfa.target_resolution else None
                ),
            },
            "sphere": {"dim": probe.sphere.dim, "epsilon": probe.sphere.epsilon},
            "mapping": {
                "kind": probe.mapping.kind,
                "feature_dim": probe.mapping.feature_dim,
                "seed": probe.mapping.seed,
                "bandwidth": probe.mapping.bandwidth,
            },
            "ablation": {
                "sfa_on": probe.ablation.sfa_on,
                "cfa_on": probe.ablation.cfa_on,
                "udd_on": probe.ablation.udd_on,
            },
            "protocol": probe.protocol,
            "mmd_normalization": probe.mmd_normalization,
            "accumulation": probe.accumulation,
            "sfa_shared_dim": probe.sfa_shared_dim,
            "lr": probe.lr,
            "momentum": probe.momentum,
            "weight_decay": probe.weight_decay,
            "schedule": probe.schedule,
            "epochs": probe.epochs,
            "expert_epochs": probe.expert_epochs,
            "batch_size": probe.batch_size,
            "kd_temperature": probe.kd_temperature,
            "kd_weight": probe.kd_weight,
            "dkd_temperature": probe.dkd_temperature,
            "dkd_tckd_weight": probe.dkd_tckd_weight,
            "dkd_nckd_weight": probe.dkd_nckd_weight,
        },
    }


def resolved_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(resolve(cfg), sort_keys=True)
