"""Batch random mask over the final feature map, and the center losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .numerics import ContractError, DimensionError


@dataclass(frozen=True)
class MaskPlan:
    grid_h: int
    grid_w: int
    masked_positions: frozenset[tuple[int, int]]
    ratio: float

    def as_tensor(self, dtype=torch.float64) -> torch.Tensor:
        """``(grid_h, grid_w, 1)`` keep-mask: 0 at masked cells, 1 elsewhere."""
        keep = torch.ones(self.grid_h, self.grid_w, 1, dtype=dtype)
        for r, c in self.masked_positions:
            keep[r, c, 0] = 0.0
        return keep


def mask_count(grid_h: int, grid_w: int, ratio: float) -> int:
    # round half up; Python's round() is banker's rounding
    return int(np.floor(ratio * grid_h * grid_w + 0.5))


def sample_mask_plan(grid_h: int, grid_w: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Draw ``round(ratio * cells)`` distinct cells uniformly without replacement.

    Consumes exactly one ``rng.permutation`` call, regardless of ratio.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"mask ratio must lie in [0, 1], got {ratio}")
    cells = grid_h * grid_w
    k = mask_count(grid_h, grid_w, ratio)
    chosen = rng.permutation(cells)[:k]
    positions = frozenset((int(i) // grid_w, int(i) % grid_w) for i in chosen)
    return MaskPlan(grid_h, grid_w, positions, ratio)


def apply_batch_random_mask(batch: torch.Tensor, plan: MaskPlan) -> torch.Tensor:
    """Zero the planned cells of every sample in ``(m, h, w, c)``.

    Multiplying by a constant 0/1 mask also zeroes the gradient at masked cells.
    """
    if batch.dim() != 4 or batch.shape[1:3] != (plan.grid_h, plan.grid_w):
        raise DimensionError(
            f"mask plan {plan.grid_h}x{plan.grid_w} does not match batch {tuple(batch.shape)}"
        )
    if not plan.masked_positions:
        return batch
    return batch * plan.as_tensor(batch.dtype)


def center_loss(features: torch.Tensor, class_ids, centers: torch.Tensor) -> torch.Tensor:
    """Single-label center loss, ``0.5 * sum_i ||f_i - c_{y_i}||^2``."""
    ids = torch.as_tensor(np.asarray(class_ids), dtype=torch.long)
    if ids.numel() and (ids.min() < 0 or ids.max() >= centers.shape[0]):
        raise ContractError(f"class ids out of range for {centers.shape[0]} centers")
    diff = features - centers[ids]
    return 0.5 * (diff * diff).sum()


def macl_loss(features: torch.Tensor, labels: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Multi-attribute center loss.

    Each sample is pulled toward the center of every attribute it carries:
    ``1/(2mn) * sum_ij y_ij ||f_i - c_j||^2``.
    """
    m, d = features.shape
    n = labels.shape[1]
    if centers.shape != (n, d):
        raise DimensionError(f"centers {tuple(centers.shape)} do not match ({n}, {d})")
    if not torch.all((labels == 0) | (labels == 1)):
        raise ContractError("macl_loss labels must be binary")
    y = labels.to(features.dtype)
    diff = features[:, None, :] - centers[None, :, :]
    sq = (diff * diff).sum(dim=-1)
    return (y * sq).sum() / (2.0 * m * n)
