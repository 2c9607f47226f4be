"""Shallow feature alignment.

Expert shallow features are low-passed with a parameter-free multi-scale
average-pooling filter; the student side uses a learnable filter that
fuses a strided-convolution downsample with the same multi-scale filter
through a depthwise-separable 3x3 convolution. Both sides are flattened
and aligned through the shared projector/decoder machinery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .align import ProjectionPair, feature_alignment_loss, mmd_loss, reconstruction_loss
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class MsLfConfig:
    """Multi-scale low-pass filter: one average-pooling group per kernel.

    Strides default to the kernel sizes (non-overlapping windows); every
    group is bilinearly re-expanded to target_resolution and the groups
    are concatenated along channels. A target_resolution of None means
    half the input feature's own resolution.
    """

    kernel_sizes: tuple[int, ...] = (2, 4, 8)
    strides: tuple[int, ...] | None = None
    target_resolution: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(self.kernel_sizes))
        if not self.kernel_sizes:
            raise InputError("need at least one filter group")
        if any(k < 1 for k in self.kernel_sizes):
            raise InputError("kernel sizes must be >= 1")
        strides = self.strides if self.strides is not None else self.kernel_sizes
        object.__setattr__(self, "strides", tuple(strides))
        if len(self.strides) != len(self.kernel_sizes):
            raise InputError("strides must match kernel_sizes in length")
        if any(s < 1 for s in self.strides):
            raise InputError("strides must be >= 1")
        if self.target_resolution is not None:
            object.__setattr__(self, "target_resolution", tuple(self.target_resolution))

    @property
    def num_groups(self) -> int:
        return len(self.kernel_sizes)

    def resolve_target(self, height: int, width: int) -> tuple[int, int]:
        if self.target_resolution is not None:
            return self.target_resolution
        return max(height // 2, 1), max(width // 2, 1)


def ms_low_pass(feature: torch.Tensor, config: MsLfConfig) -> torch.Tensor:
    """Average-pool each group, resize to the common grid, concat channels.

    Parameter-free and linear in the input, hence differentiable.
    """
    if feature.ndim != 4:
        raise InputError(f"feature must be BxCxHxW, got {tuple(feature.shape)}")
    height, width = feature.shape[2:]
    if max(config.kernel_sizes) > min(height, width):
        raise InputError(
            f"kernel {max(config.kernel_sizes)} exceeds spatial extent "
            f"{(height, width)}"
        )
    target = config.resolve_target(height, width)
    groups = []
    for kernel, stride in zip(config.kernel_sizes, config.strides):
        pooled = F.avg_pool2d(feature, kernel_size=kernel, stride=stride)
        if pooled.shape[2:] != target:
            pooled = F.interpolate(pooled, size=target, mode="bilinear",
                                   align_corners=False)
        groups.append(pooled)
    return torch.cat(groups, dim=1)


class StudentFilter(nn.Module):
    """Learnable low-pass filter for the student's shallow features.

    Concatenates a strided-convolution downsample branch with the
    multi-scale low-pass branch, then fuses with a 3x3 depthwise
    separable convolution. The downsample stride is chosen so both
    branches land on the filter's target grid.
    """

    def __init__(self, channels: int, input_resolution: tuple[int, int],
                 config: MsLfConfig, out_channels: int | None = None):
        super().__init__()
        self.config = config
        height, width = input_resolution
        target = config.resolve_target(height, width)
        if height % target[0] or width % target[1]:
            raise ConfigError(
                f"input {input_resolution} not an integer multiple of "
                f"target {target}"
            )
        s_h, s_w = height // target[0], width // target[1]
        if s_h != s_w:
            raise ConfigError(
                f"downsample stride must be square, got {s_h}x{s_w} for "
                f"{input_resolution} -> {target}"
            )
        self.downsample = nn.Conv2d(channels, channels, kernel_size=s_h, stride=s_h)
        fused_in = channels * (1 + config.num_groups)
        self.fuse_depthwise = nn.Conv2d(fused_in, fused_in, 3, padding=1,
                                        groups=fused_in)
        self.fuse_pointwise = nn.Conv2d(fused_in, out_channels or channels, 1)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        down = self.downsample(feature)
        low = ms_low_pass(feature, self.config)
        if down.shape[2:] != low.shape[2:]:
            raise ConfigError(
                f"branch shapes diverge: downsample {tuple(down.shape[2:])} "
                f"vs low-pass {tuple(low.shape[2:])}"
            )
        fused = torch.cat([down, low], dim=1)
        return self.fuse_pointwise(self.fuse_depthwise(fused))


def student_filter(feature: torch.Tensor, params: StudentFilter) -> torch.Tensor:
    """Apply the learnable student-side filter."""
    return params(feature)


def sfa_feature_dim(channels: int, resolution: tuple[int, int],
                    config: MsLfConfig) -> int:
    """Flattened size of ms_low_pass output for one model's shallow map."""
    target = config.resolve_target(*resolution)
    return config.num_groups * channels * target[0] * target[1]


def sfa_loss(expert_shallow: Sequence[torch.Tensor], student_shallow: torch.Tensor,
             pairs: Sequence[ProjectionPair], filt: StudentFilter,
             student_projector: nn.Module, config: MsLfConfig,
             mapping: nn.Module | None = None,
             normalization: str = "paper") -> torch.Tensor:
    """Alignment loss between filtered expert and student shallow features.

    Experts go through the parameter-free filter then their projector;
    the student goes through the learnable filter then its projector.
    Reconstruction decodes each expert's projected features back to its
    own filtered features.
    """
    if len(expert_shallow) != len(pairs):
        raise InputError("need exactly one ProjectionPair per expert")
    filtered, projected, decoded = [], [], []
    for feats, pair in zip(expert_shallow, pairs):
        flat = ms_low_pass(feats, config).flatten(1)
        proj = pair.project(flat)
        filtered.append(flat)
        projected.append(proj)
        decoded.append(pair.decode(proj))
    student_feat = student_projector(filt(student_shallow).flatten(1))
    mmd = mmd_loss(projected, student_feat, mapping, normalization)
    mse = reconstruction_loss(filtered, decoded)
    return feature_alignment_loss(mmd, mse)


def total_variation(feature: torch.Tensor) -> torch.Tensor:
    """Sum of absolute horizontal and vertical neighbor differences."""
    dh = (feature[..., 1:, :] - feature[..., :-1, :]).abs().sum()
    dw = (feature[..., :, 1:] - feature[..., :, :-1]).abs().sum()
    return dh + dw
