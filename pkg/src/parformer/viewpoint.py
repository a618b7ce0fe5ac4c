"""Viewpoint labels, the viewpoint head, and the multi-view contrastive loss."""
from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np
import torch

from .numerics import ContractError, DimensionError, cosine_similarity, linear, trunc_normal

VIEWPOINTS = ("front", "back", "side")
_ALIASES = {"left": "side", "right": "side"}


class DegenerateBatchWarning(UserWarning):
    """The batch holds no same-viewpoint pair, so the contrastive loss is 0."""


def viewpoint_index(label: str | int) -> int:
    if isinstance(label, (int, np.integer)):
        if not 0 <= int(label) < 3:
            raise ContractError(f"viewpoint index out of range: {label}")
        return int(label)
    name = _ALIASES.get(label, label)
    try:
        return VIEWPOINTS.index(name)
    except ValueError:
        raise ContractError(f"unknown viewpoint {label!r}; expected one of {VIEWPOINTS}") from None


def _as_index_tensor(views) -> torch.Tensor:
    if isinstance(views, torch.Tensor):
        return views.long()
    return torch.tensor([viewpoint_index(v) for v in views], dtype=torch.long)


def init_viewpoint_params(d: int, d_v: int, rng: np.random.Generator) -> dict[str, torch.Tensor]:
    return {
        "viewpoint.proj.weight": torch.from_numpy(trunc_normal(rng, (d, d_v))),
        "viewpoint.proj.bias": torch.zeros(d_v, dtype=torch.float64),
        "viewpoint.cls.weight": torch.from_numpy(trunc_normal(rng, (d_v, 3))),
        "viewpoint.cls.bias": torch.zeros(3, dtype=torch.float64),
    }


def viewpoint_forward(pooled: torch.Tensor, params) -> tuple[torch.Tensor, torch.Tensor]:
    """Project pooled features to the contrastive space, then classify into 3 views."""
    w = params["viewpoint.proj.weight"]
    if pooled.shape[-1] != w.shape[0]:
        raise DimensionError(f"pooled {tuple(pooled.shape)} does not match projection {tuple(w.shape)}")
    reps = linear(pooled, w, params["viewpoint.proj.bias"])
    logits = linear(reps, params["viewpoint.cls.weight"], params["viewpoint.cls.bias"])
    return reps, logits


def has_positive_pair(views) -> bool:
    idx = _as_index_tensor(views)
    return bool(torch.bincount(idx, minlength=3).max() >= 2)


def mvcl_loss(
    reps: torch.Tensor,
    views: Sequence[str] | torch.Tensor,
    temperature: float,
    first_positive_only: bool = False,
) -> torch.Tensor:
    """Multi-view contrastive loss over cosine similarities.

    For anchor ``i`` and same-view partner ``j``::

        l(i, j) = -log( exp(s_ij / T) / sum_{k != i} exp(s_ik / T) )

    ``l(i)`` averages over all partners (or takes the lowest-index partner when
    ``first_positive_only``); the loss averages ``l(i)`` over anchors that have
    a partner.  A batch with no partner anywhere returns 0 and emits
    :class:`DegenerateBatchWarning`.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    m = reps.shape[0]
    if m < 2:
        raise ContractError("mvcl_loss needs at least 2 samples")
    v = _as_index_tensor(views)
    if v.shape[0] != m:
        raise DimensionError(f"{v.shape[0]} viewpoint labels for {m} representations")

    sim = cosine_similarity(reps[:, None, :], reps[None, :, :]) / temperature
    eye = torch.eye(m, dtype=torch.bool)
    positives = (v[:, None] == v[None, :]) & ~eye
    if first_positive_only:
        first = torch.where(positives, torch.arange(m).expand(m, m), m).min(dim=1).values
        positives = torch.zeros_like(positives)
        rows = first < m
        positives[rows.nonzero().squeeze(1), first[rows]] = True

    anchors = positives.any(dim=1)
    if not anchors.any():
        warnings.warn("no same-viewpoint pair in batch", DegenerateBatchWarning, stacklevel=2)
        return reps.sum() * 0.0

    log_denom = torch.logsumexp(sim.masked_fill(eye, float("-inf")), dim=1)
    pos = positives.to(sim.dtype)
    per_pair = (log_denom[:, None] - sim) * pos
    per_anchor = per_pair.sum(dim=1)[anchors] / pos.sum(dim=1)[anchors]
    return per_anchor.mean()


def viewpoint_ce_loss(logits: torch.Tensor, views) -> torch.Tensor:
    v = _as_index_tensor(views)
    log_p = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    return -log_p.gather(1, v[:, None]).mean()
