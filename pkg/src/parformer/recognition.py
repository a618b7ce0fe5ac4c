"""Attribute head, asymmetric loss, the joint objective, and thresholded prediction."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .numerics import ContractError, DimensionError, linear

PROB_CLAMP = 1e-8


@dataclass
class LossConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 1.0
    lambda1: float = 0.2
    lambda2: float = 1.0
    temperature: float = 0.1
    # sum is the literal double sum; under "mean" the 1/(mn) factor leaves lambda1*MACL
    # dominating the attribute loss and the centers collapse the features
    asl_reduction: str = "sum"
    viewpoint_ce_weight: float = 0.0
    first_positive_only: bool = False

    def validate(self) -> "LossConfig":
        if min(self.gamma_pos, self.gamma_neg, self.lambda1, self.lambda2, self.viewpoint_ce_weight) < 0:
            raise ContractError("focusing parameters and loss weights must be non-negative")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be positive, got {self.temperature}")
        if self.asl_reduction not in ("sum", "mean"):
            raise ContractError(f"asl_reduction must be 'sum' or 'mean', got {self.asl_reduction!r}")
        return self


@dataclass
class AttributePredictions:
    probabilities: torch.Tensor
    decisions: torch.Tensor


def init_attribute_params(d: int, n: int) -> dict[str, torch.Tensor]:
    # zero init: a random head makes collapsing the features the cheapest first move
    return {
        "attr_head.weight": torch.zeros(d, n, dtype=torch.float64),
        "attr_head.bias": torch.zeros(n, dtype=torch.float64),
    }


def attribute_logits(pooled: torch.Tensor, params) -> torch.Tensor:
    w = params["attr_head.weight"]
    if pooled.shape[-1] != w.shape[0]:
        raise DimensionError(f"pooled {tuple(pooled.shape)} does not match head {tuple(w.shape)}")
    return linear(pooled, w, params["attr_head.bias"])


def asl_loss(p: torch.Tensor, y: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Asymmetric focal loss on probabilities.

    ``-sum[y (1-p)^g+ log p + (1-y) p^g- log(1-p)]``, divided by ``m*n`` for
    ``mean`` reduction.  Probabilities are clamped to ``[1e-8, 1-1e-8]`` inside
    the logs only.
    """
    if p.shape != y.shape:
        raise DimensionError(f"asl_loss: p {tuple(p.shape)} vs y {tuple(y.shape)}")
    if torch.any(p < 0) or torch.any(p > 1):
        raise ContractError("asl_loss: probabilities outside [0, 1]")
    y = y.to(p.dtype)
    log_p = torch.log(p.clamp(min=PROB_CLAMP))
    log_q = torch.log((1 - p).clamp(min=PROB_CLAMP))
    pos = log_p if cfg.gamma_pos == 0 else (1 - p) ** cfg.gamma_pos * log_p
    neg = log_q if cfg.gamma_neg == 0 else p ** cfg.gamma_neg * log_q
    loss = -(y * pos + (1 - y) * neg).sum()
    if cfg.asl_reduction == "mean":
        loss = loss / p.numel()
    return loss


def total_loss(asl, macl, mvcl, cfg: LossConfig):
    return asl + cfg.lambda1 * macl + cfg.lambda2 * mvcl


def predict(logits: torch.Tensor, threshold: float = 0.5) -> AttributePredictions:
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    p = torch.sigmoid(logits)
    return AttributePredictions(p, (p > threshold).to(torch.int64))
