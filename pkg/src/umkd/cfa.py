"""Compact feature alignment.

Deep (last-stage) features of every model are globally pooled, mapped to
a common dimension by a per-model adapter, and projected onto the unit
hypersphere, where expert and student embeddings are aligned. Expert
embeddings are additionally decoded back toward the direction of their
own pooled features as a reconstruction check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .align import ProjectionPair, feature_alignment_loss, mmd_loss, reconstruction_loss
from .errors import InputError


@dataclass(frozen=True)
class SphereSpace:
    """Shared spherical embedding space."""

    dim: int = 64
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.dim < 2:
            raise InputError(f"sphere dimension must be >= 2, got {self.dim}")
        if not self.epsilon > 0:
            raise InputError("epsilon must be positive")


class DimAdapter(nn.Linear):
    """Per-model affine map from its deep channel width to the shared dim."""


def adapt_and_pool(deep: torch.Tensor, adapter: DimAdapter) -> torch.Tensor:
    """Global average pool then map to the shared dimension.

    Pooling first commutes with the affine map by linearity, so this is
    equivalent to mapping position-wise and then pooling.
    """
    if deep.ndim != 4:
        raise InputError(f"deep features must be BxCxHxW, got {tuple(deep.shape)}")
    if deep.shape[1] != adapter.in_features:
        raise InputError(
            f"adapter expects {adapter.in_features} channels, got {deep.shape[1]}"
        )
    return adapter(deep.mean(dim=(2, 3)))


def _unit(v: torch.Tensor, epsilon: float) -> torch.Tensor:
    norms = v.norm(dim=-1, keepdim=True).clamp_min(epsilon)
    return v / norms


def project_to_sphere(v: torch.Tensor, space: SphereSpace) -> torch.Tensor:
    """Row-wise L2 normalization with an epsilon guard for zero vectors."""
    if v.shape[-1] != space.dim:
        raise InputError(f"expected dimension {space.dim}, got {v.shape[-1]}")
    return _unit(v, space.epsilon)


def _embed(deep: torch.Tensor, adapter: DimAdapter, space: SphereSpace
           ) -> tuple[torch.Tensor, torch.Tensor]:
    """Pooled feature direction and its adapted spherical embedding.

    Magnitudes are stripped before the adapter so the embedding (and
    everything downstream) is invariant to positive rescaling of the
    model's features even though the adapter is affine.
    """
    if deep.ndim != 4:
        raise InputError(f"deep features must be BxCxHxW, got {tuple(deep.shape)}")
    if deep.shape[1] != adapter.in_features:
        raise InputError(
            f"adapter expects {adapter.in_features} channels, got {deep.shape[1]}"
        )
    direction = _unit(deep.mean(dim=(2, 3)), space.epsilon)
    return direction, project_to_sphere(adapter(direction), space)


def cfa_loss(expert_deep: Sequence[torch.Tensor], student_deep: torch.Tensor,
             expert_adapters: Sequence[DimAdapter], student_adapter: DimAdapter,
             pairs: Sequence[ProjectionPair], space: SphereSpace,
             mapping: nn.Module | None = None,
             normalization: str = "paper") -> torch.Tensor:
    """Alignment loss between spherical embeddings of deep features.

    The student adapter participates in the MMD term only; reconstruction
    decodes each expert's spherical embedding back to the direction of
    its pooled deep feature. Scale invariance holds for every model.
    """
    if not len(expert_deep) == len(expert_adapters) == len(pairs):
        raise InputError("need one adapter and one ProjectionPair per expert")
    embeddings, targets, decoded = [], [], []
    for deep, adapter, pair in zip(expert_deep, expert_adapters, pairs):
        direction, z = _embed(deep, adapter, space)
        embeddings.append(z)
        targets.append(direction)
        decoded.append(pair.decode(z))
    _, student_z = _embed(student_deep, student_adapter, space)
    mmd = mmd_loss(embeddings, student_z, mapping, normalization)
    mse = reconstruction_loss(targets, decoded)
    return feature_alignment_loss(mmd, mse)
