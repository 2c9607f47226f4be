"""Toy multi-stage CNN backbones with feature taps.

Every model in the framework exposes the same three probe points per
forward pass: the shallow-stage feature map, the deep (last-stage)
feature map, and a spatial logits map obtained by applying the final
linear classifier position-wise to the deep features.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InputError, NumericError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture description for one expert or student network."""

    name: str
    stage_channels: tuple[int, ...]
    num_classes: int
    input_resolution: tuple[int, int]
    stage_strides: tuple[int, ...] | None = None
    shallow_stage: int = 1  # 1-indexed stage whose output is the shallow tap

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        object.__setattr__(self, "input_resolution", tuple(self.input_resolution))
        if not self.stage_channels:
            raise InputError("stage_channels must be non-empty")
        if self.num_classes < 2:
            raise InputError(f"num_classes must be >= 2, got {self.num_classes}")
        strides = self.stage_strides
        if strides is None:
            strides = (2,) * (len(self.stage_channels) - 1) + (1,)
        object.__setattr__(self, "stage_strides", tuple(strides))
        if len(self.stage_strides) != len(self.stage_channels):
            raise InputError("stage_strides must match stage_channels in length")
        factor = self.downsampling_factor
        h, w = self.input_resolution
        if h % factor or w % factor:
            raise InputError(
                f"input resolution {self.input_resolution} not divisible by "
                f"total downsampling factor {factor}"
            )
        if not 1 <= self.shallow_stage <= len(self.stage_channels):
            raise InputError(f"shallow_stage {self.shallow_stage} out of range")

    @property
    def downsampling_factor(self) -> int:
        return math.prod(self.stage_strides)

    def stage_resolution(self, stage: int) -> tuple[int, int]:
        """Spatial size of the feature map after the given 1-indexed stage."""
        factor = math.prod(self.stage_strides[:stage])
        return self.input_resolution[0] // factor, self.input_resolution[1] // factor

    @property
    def shallow_resolution(self) -> tuple[int, int]:
        return self.stage_resolution(self.shallow_stage)

    @property
    def deep_resolution(self) -> tuple[int, int]:
        return self.stage_resolution(len(self.stage_channels))

    @property
    def shallow_channels(self) -> int:
        return self.stage_channels[self.shallow_stage - 1]

    @property
    def deep_channels(self) -> int:
        return self.stage_channels[-1]


@dataclass
class FeatureTaps:
    """All probe points from a single forward pass."""

    shallow: torch.Tensor       # B x C_s x H_s x W_s
    deep: torch.Tensor          # B x C_d x H_d x W_d
    logits_map: torch.Tensor    # B x C x H_d x W_d
    pooled_logits: torch.Tensor  # B x C
    class_count: int = field(init=False)

    def __post_init__(self):
        self.class_count = self.logits_map.shape[1]


def _stage(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, stride=stride, padding=1),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class ToyBackbone(nn.Module):
    """Multi-stage CNN classifier sized by a BackboneSpec.

    Experts use wider stage_channels than the student, so the model
    family is genuinely heterogeneous while staying cheap enough for
    CPU-scale experiments.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        stages = []
        in_ch = 3
        for out_ch, stride in zip(spec.stage_channels, spec.stage_strides):
            stages.append(_stage(in_ch, out_ch, stride))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.classifier = nn.Linear(spec.deep_channels, spec.num_classes)

    def forward_with_taps(self, batch: torch.Tensor) -> FeatureTaps:
        expected = self.spec.input_resolution
        if batch.ndim != 4 or batch.shape[1] != 3 or tuple(batch.shape[2:]) != expected:
            raise InputError(
                f"expected batch of shape Bx3x{expected[0]}x{expected[1]}, "
                f"got {tuple(batch.shape)}"
            )
        x = batch
        shallow = None
        for i, stage in enumerate(self.stages, start=1):
            x = stage(x)
            if i == self.spec.shallow_stage:
                shallow = x
        deep = x
        logits_map = logits_map_from_features(
            deep, self.classifier.weight, self.classifier.bias
        )
        pooled = logits_map.mean(dim=(2, 3))
        if not torch.isfinite(pooled).all():
            raise NumericError(f"non-finite activations in {self.spec.name}")
        return FeatureTaps(shallow=shallow, deep=deep,
                           logits_map=logits_map, pooled_logits=pooled)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.forward_with_taps(batch).pooled_logits


def forward_with_taps(model: ToyBackbone, batch: torch.Tensor) -> FeatureTaps:
    """Run one forward pass and return all four taps."""
    return model.forward_with_taps(batch)


def logits_map_from_features(deep: torch.Tensor, weight: torch.Tensor,
                             bias: torch.Tensor) -> torch.Tensor:
    """Apply a linear classifier position-wise to a deep feature map.

    deep may be CxHxW or BxCxHxW; the classifier (weight CxC_d, bias C)
    acts as a 1x1 convolution, so the spatial mean of the result equals
    the classifier applied to the spatial mean of the features.
    """
    squeeze = deep.ndim == 3
    if squeeze:
        deep = deep.unsqueeze(0)
    if deep.ndim != 4:
        raise InputError(f"deep feature map must be (B,)CxHxW, got {tuple(deep.shape)}")
    if weight.ndim != 2 or weight.shape[1] != deep.shape[1]:
        raise InputError(
            f"classifier weight {tuple(weight.shape)} does not match "
            f"feature channels {deep.shape[1]}"
        )
    if bias.shape != (weight.shape[0],):
        raise InputError(f"classifier bias shape {tuple(bias.shape)} invalid")
    out = F.conv2d(deep, weight.unsqueeze(-1).unsqueeze(-1), bias)
    return out.squeeze(0) if squeeze else out


def build_backbone(spec: BackboneSpec, seed: int | None = None) -> ToyBackbone:
    """Construct a ToyBackbone, optionally with seeded initialization."""
    if seed is None:
        return ToyBackbone(spec)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return ToyBackbone(spec)


def freeze(model: nn.Module) -> nn.Module:
    """Put a model into the frozen-expert state (no grads, eval mode)."""
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


def state_hash(model: nn.Module) -> str:
    """Deterministic digest of all parameters and buffers."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: ToyBackbone, path) -> None:
    """Serialize weights with a versioned header echoing the BackboneSpec."""
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "spec": asdict(model.spec),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> ToyBackbone:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    version = blob.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise InputError(f"unsupported checkpoint format version: {version}")
    spec = BackboneSpec(**blob["spec"])
    model = ToyBackbone(spec)
    model.load_state_dict(blob["state_dict"])
    return model
