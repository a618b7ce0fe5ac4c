"""Dense tensor kernels shared by every other module.

Tensors are ``torch.Tensor``; gradients come from autograd.  The finite
difference routine below is deliberately independent of autograd so it can
serve as the oracle for every analytic gradient in the package.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
import torch

LN_EPS = 1e-5
COS_EPS = 1e-12


class DimensionError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"linear: input {tuple(x.shape)} incompatible with weight {tuple(weight.shape)}"
        )
    out = x @ weight
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise DimensionError(
                f"linear: bias {tuple(bias.shape)} incompatible with weight {tuple(weight.shape)}"
            )
        out = out + bias
    return out


def layer_norm(
    x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = LN_EPS
) -> torch.Tensor:
    """Normalize over the trailing axis using the biased variance."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: input {tuple(x.shape)} vs gamma {tuple(gamma.shape)}, beta {tuple(beta.shape)}"
        )
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return gamma * centered / torch.sqrt(var + eps) + beta


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact erf form
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def global_average_pool(x: torch.Tensor) -> torch.Tensor:
    """Mean over the two spatial axes of ``(..., h, w, c)``."""
    if x.dim() < 3:
        raise DimensionError(f"global_average_pool: need (..., h, w, c), got {tuple(x.shape)}")
    return x.mean(dim=(-3, -2))


def cosine_similarity(a: torch.Tensor, b: torch.Tensor, eps: float = COS_EPS) -> torch.Tensor:
    """Cosine similarity along the last axis, clamped to [-1, 1].

    Broadcasts over leading axes, so ``cosine_similarity(x[:, None], x[None])``
    yields the full pairwise matrix.
    """
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_similarity: {tuple(a.shape)} vs {tuple(b.shape)}")
    na = torch.linalg.vector_norm(a, dim=-1).clamp(min=eps)
    nb = torch.linalg.vector_norm(b, dim=-1).clamp(min=eps)
    return ((a * b).sum(dim=-1) / (na * nb)).clamp(-1.0, 1.0)


def finite_difference_gradient(
    f: Callable[[torch.Tensor], torch.Tensor | float],
    x: torch.Tensor,
    h_scale: float = 1e-6,
    indices: np.ndarray | None = None,
) -> torch.Tensor:
    """Central-difference gradient of a scalar function, evaluated in float64.

    ``h_i = h_scale * max(1, |x_i|)``.  If ``indices`` (flat positions) is
    given, only those coordinates are perturbed; the rest of the result is NaN.
    """
    base = x.detach().to(torch.float64).clone()
    flat = base.view(-1)
    grad = torch.full_like(flat, float("nan") if indices is not None else 0.0)
    coords = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in coords:
            i = int(i)
            orig = flat[i].item()
            h = h_scale * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = _scalar(f(base))
            flat[i] = orig - h
            fm = _scalar(f(base))
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
    return grad.view_as(base)


def _scalar(value) -> float:
    if isinstance(value, torch.Tensor):
        if value.numel() != 1:
            raise ContractError(
                f"finite_difference_gradient needs a scalar-valued function, got shape {tuple(value.shape)}"
            )
        return float(value.item())
    return float(value)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-8) -> torch.Tensor:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = analytic.detach().to(torch.float64)
    n = numeric.detach().to(torch.float64)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    return (a - n).abs() / denom


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) truncated at +-bound*std, by resampling the tails."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std
