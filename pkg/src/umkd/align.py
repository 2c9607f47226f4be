"""Feature-alignment loss primitives shared by the shallow and compact
alignment paths: a batch-sum MMD distance, an expert reconstruction
penalty, and their unit-weight sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .errors import InputError, NumericError

MMD_NORMALIZATIONS = ("paper", "mean-embedding")


@dataclass(frozen=True)
class MappingSpec:
    """Explicit feature mapping applied inside the MMD distance.

    kind "identity" performs linear-kernel mean matching; "random-fourier"
    approximates a Gaussian kernel of the given bandwidth with a fixed,
    seeded cosine feature bank.
    """

    kind: str = "identity"
    feature_dim: int | None = None
    seed: int = 0
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "random-fourier"):
            raise InputError(f"unknown mapping kind: {self.kind!r}")
        if self.kind == "random-fourier":
            if self.feature_dim is None or self.feature_dim < 1:
                raise InputError("random-fourier mapping needs feature_dim >= 1")
            if not self.bandwidth > 0:
                raise InputError("bandwidth must be positive")


class RandomFourierMapping(nn.Module):
    """Seeded random cosine features approximating a Gaussian kernel."""

    def __init__(self, input_dim: int, feature_dim: int, bandwidth: float, seed: int):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        freq = torch.randn(input_dim, feature_dim, generator=gen, dtype=torch.float64)
        freq = freq / bandwidth
        phase = torch.rand(feature_dim, generator=gen, dtype=torch.float64) * 2 * math.pi
        self.register_buffer("freq", freq)
        self.register_buffer("phase", phase)
        self.scale = math.sqrt(2.0 / feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        freq = self.freq.to(x.dtype)
        phase = self.phase.to(x.dtype)
        return self.scale * torch.cos(x @ freq + phase)


def build_mapping(spec: MappingSpec, input_dim: int) -> nn.Module:
    if spec.kind == "identity":
        return nn.Identity()
    return RandomFourierMapping(input_dim, spec.feature_dim, spec.bandwidth, spec.seed)


class ProjectionPair(nn.Module):
    """Trainable projector/decoder pair attached to one expert.

    The projector maps the expert's (flattened) features into the shared
    alignment space; the decoder maps back so the reconstruction loss can
    verify the expert's knowledge survived the projection. Both belong to
    the adapter parameter set, never to the frozen expert backbone.
    """

    def __init__(self, feature_dim: int, shared_dim: int, with_projector: bool = True):
        super().__init__()
        self.projector = nn.Linear(feature_dim, shared_dim) if with_projector else None
        self.decoder = nn.Linear(shared_dim, feature_dim)

    def project(self, feats: torch.Tensor) -> torch.Tensor:
        if self.projector is None:
            raise InputError("this ProjectionPair was built without a projector")
        return self.projector(feats)

    def decode(self, shared: torch.Tensor) -> torch.Tensor:
        return self.decoder(shared)


def mmd_loss(expert_feats: Sequence[torch.Tensor], student_feat: torch.Tensor,
             mapping: nn.Module | None = None,
             normalization: str = "paper") -> torch.Tensor:
    """Squared distance between batch-summed mapped features.

    For each expert t: || sum_i phi(e_t_i) - sum_j phi(s_j) ||^2, summed
    over experts and divided by the batch size B ("paper"), or by B^2
    ("mean-embedding", the conventional mean-matching form).
    """
    if len(expert_feats) == 0:
        raise InputError("mmd_loss needs at least one expert feature batch")
    if normalization not in MMD_NORMALIZATIONS:
        raise InputError(f"unknown mmd normalization: {normalization!r}")
    if student_feat.ndim != 2:
        raise InputError("features must be 2-d (batch x dim)")
    batch, dim = student_feat.shape
    for t, feats in enumerate(expert_feats):
        if feats.shape != (batch, dim):
            raise InputError(
                f"expert {t} features {tuple(feats.shape)} do not match "
                f"student features {(batch, dim)}"
            )
    phi = mapping if mapping is not None else nn.Identity()
    student_sum = phi(student_feat).sum(dim=0)
    total = student_feat.new_zeros(())
    for feats in expert_feats:
        diff = phi(feats).sum(dim=0) - student_sum
        total = total + diff.pow(2).sum()
    if normalization == "paper":
        return total / batch
    return total / batch**2


def reconstruction_loss(originals: Sequence[torch.Tensor],
                        decoded: Sequence[torch.Tensor]) -> torch.Tensor:
    """Summed squared error between expert features and their decodings."""
    if len(originals) != len(decoded):
        raise InputError("originals and decoded must pair up one per expert")
    if len(originals) == 0:
        raise InputError("reconstruction_loss needs at least one expert")
    total = originals[0].new_zeros(())
    for t, (orig, dec) in enumerate(zip(originals, decoded)):
        if orig.shape != dec.shape:
            raise InputError(
                f"expert {t}: original shape {tuple(orig.shape)} != "
                f"decoded shape {tuple(dec.shape)}"
            )
        total = total + (orig - dec).pow(2).sum()
    return total


def feature_alignment_loss(mmd: torch.Tensor, mse: torch.Tensor) -> torch.Tensor:
    """Unit-weight sum of the two alignment components."""
    for name, value in (("mmd", mmd), ("mse", mse)):
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NumericError(f"non-finite {name} component")
    return mmd + mse
