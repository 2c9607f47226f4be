"""Uncertainty-weighted decoupled logits distillation.

Spatial logits maps are partitioned into w x w grids at several scales;
per cell, accumulated class logits from teacher and student are compared
with a softmax-space term and a raw-logit term, weighted by the
teacher's prediction uncertainty in that cell.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import InputError, NumericError

ACCUMULATION_RULES = ("literal", "cell-mean")


@dataclass(frozen=True)
class ScaleSet:
    """Ordered partition widths, starting at 1 and strictly increasing."""

    scales: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(self.scales))
        if not self.scales or self.scales[0] != 1:
            raise InputError("scales must start at 1")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise InputError("scales must be strictly increasing")

    def validate_for(self, height: int, width: int) -> None:
        if self.scales[-1] > min(height, width):
            raise InputError(
                f"scale {self.scales[-1]} exceeds map extent {(height, width)}"
            )


def partition_cells(height: int, width: int, scale: int) -> list[tuple[slice, slice]]:
    """Row-major w x w grid of slice pairs covering the full H x W grid.

    When the extent is not divisible by the scale, the trailing cells
    absorb the remainder rows/columns, so the cells are always a disjoint
    cover.
    """
    if not 1 <= scale <= min(height, width):
        raise InputError(f"scale {scale} out of range for {(height, width)}")
    row_step, col_step = height // scale, width // scale
    rows = [
        slice(i * row_step, (i + 1) * row_step if i < scale - 1 else height)
        for i in range(scale)
    ]
    cols = [
        slice(j * col_step, (j + 1) * col_step if j < scale - 1 else width)
        for j in range(scale)
    ]
    return [(r, c) for r in rows for c in cols]


def accumulate_logits(logits_map: torch.Tensor, scale: int,
                      rule: str = "literal") -> torch.Tensor:
    """Per-cell accumulated class logits at one partition scale.

    Accepts CxHxW or BxCxHxW and returns (...,C, w^2) with cells in
    row-major order. "literal" divides each cell's logit sum by w^2;
    "cell-mean" divides by the cell's own element count instead, which
    keeps magnitudes comparable across scales and map sizes.
    """
    if rule not in ACCUMULATION_RULES:
        raise InputError(f"unknown accumulation rule: {rule!r}")
    if logits_map.ndim not in (3, 4):
        raise InputError(f"logits map must be (B,)CxHxW, got {tuple(logits_map.shape)}")
    height, width = logits_map.shape[-2:]
    cells = partition_cells(height, width, scale)
    accumulated = []
    for rows, cols in cells:
        block = logits_map[..., rows, cols]
        total = block.sum(dim=(-2, -1))
        if rule == "literal":
            accumulated.append(total / scale**2)
        else:
            accumulated.append(total / (block.shape[-2] * block.shape[-1]))
    return torch.stack(accumulated, dim=-1)


def uncertainty(psi_teacher: torch.Tensor) -> torch.Tensor:
    """One minus the maximum softmax probability over the class axis.

    Ranges over [0, 1 - 1/C] and is invariant to adding a constant to
    every class logit.
    """
    if not torch.isfinite(psi_teacher).all():
        raise NumericError("non-finite accumulated logits")
    return 1.0 - F.softmax(psi_teacher, dim=-1).amax(dim=-1)


def udd_cell_loss(psi_t: torch.Tensor, psi_s: torch.Tensor) -> torch.Tensor:
    """Weighted two-term distillation loss for one cell.

    (2 + u) scales the softmax-space squared error and (1 - u) the raw
    logit squared error, where u is the teacher's uncertainty for this
    cell. u acts as a constant weight (no gradient flows through it).
    The class axis is the last one; leading axes broadcast.
    """
    if psi_t.shape != psi_s.shape:
        raise InputError(
            f"class-logit vectors differ in shape: {tuple(psi_t.shape)} "
            f"vs {tuple(psi_s.shape)}"
        )
    if not torch.isfinite(psi_s).all():
        raise NumericError("non-finite student logits")
    u = uncertainty(psi_t).detach()
    tckd = (F.softmax(psi_t, dim=-1) - F.softmax(psi_s, dim=-1)).pow(2).sum(dim=-1)
    nckd = (psi_t - psi_s).pow(2).sum(dim=-1)
    return (2.0 + u) * tckd + (1.0 - u) * nckd


def udd_loss(teacher_maps: Sequence[torch.Tensor], student_map: torch.Tensor,
             scales: ScaleSet, accumulation: str = "literal") -> torch.Tensor:
    """Cell losses summed over scales and cells, averaged over batch and experts.

    Maps may be CxHxW or BxCxHxW; all must share the class and spatial
    shape. Reduction order is fixed: cells row-major, scales ascending,
    then experts.
    """
    if len(teacher_maps) == 0:
        raise InputError("udd_loss needs at least one teacher map")
    if student_map.ndim == 3:
        student_map = student_map.unsqueeze(0)
        teacher_maps = [t.unsqueeze(0) if t.ndim == 3 else t for t in teacher_maps]
    for t, tmap in enumerate(teacher_maps):
        if tmap.shape != student_map.shape:
            raise InputError(
                f"teacher map {t} shape {tuple(tmap.shape)} != "
                f"student map shape {tuple(student_map.shape)}"
            )
    height, width = student_map.shape[-2:]
    scales.validate_for(height, width)
    total = student_map.new_zeros(())
    for tmap in teacher_maps:
        per_sample = student_map.new_zeros(student_map.shape[0])
        for scale in scales.scales:
            psi_t = accumulate_logits(tmap, scale, accumulation)
            psi_s = accumulate_logits(student_map, scale, accumulation)
            # cell vectors live on the class axis; move cells ahead of it
            cell_losses = udd_cell_loss(psi_t.transpose(-2, -1), psi_s.transpose(-2, -1))
            per_sample = per_sample + cell_losses.sum(dim=-1)
        total = total + per_sample.mean()
    return total / len(teacher_maps)
