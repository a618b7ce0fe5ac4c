"""Full network: backbone, batch random mask, pooling, and the two heads."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import ModelConfig, Params, backbone_forward, init_backbone_params
from .feature_processing import MaskPlan, apply_batch_random_mask
from .numerics import DimensionError, global_average_pool
from .recognition import attribute_logits, init_attribute_params
from .viewpoint import init_viewpoint_params, viewpoint_forward

CENTER_STD = 0.1


@dataclass
class ForwardOutput:
    feature_map: torch.Tensor
    pooled: torch.Tensor
    logits: torch.Tensor
    reps: torch.Tensor
    view_logits: torch.Tensor


def init_centers(n: int, d: int, rng: np.random.Generator) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal((n, d)) * CENTER_STD)


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=torch.float32) -> Params:
    """Draw all parameters: backbone, attribute head, viewpoint head, then centers."""
    d = cfg.feature_dim
    p = init_backbone_params(cfg, rng)
    p.update(init_attribute_params(d, cfg.n_attributes))
    p.update(init_viewpoint_params(d, cfg.viewpoint_dim, rng))
    p["centers"] = init_centers(cfg.n_attributes, d, rng)
    return {k: v.to(dtype) for k, v in p.items()}


def normalize_images(images: torch.Tensor, cfg: ModelConfig) -> torch.Tensor:
    """Per-channel standardization of ``[0, 1]`` images."""
    if images.dim() != 4 or images.shape[-1] != 3:
        raise DimensionError(f"expected (B, H, W, 3) images, got {tuple(images.shape)}")
    mean = torch.tensor(cfg.pixel_mean, dtype=images.dtype)
    std = torch.tensor(cfg.pixel_std, dtype=images.dtype)
    return (images - mean) / std


def forward(params: Params, images: torch.Tensor, cfg: ModelConfig, plan: MaskPlan | None = None) -> ForwardOutput:
    """Normalize, run the backbone, mask (training only), pool, then both heads."""
    fmap = backbone_forward(normalize_images(images, cfg), params, cfg)
    if plan is not None:
        fmap = apply_batch_random_mask(fmap, plan)
    pooled = global_average_pool(fmap)
    logits = attribute_logits(pooled, params)
    reps, view_logits = viewpoint_forward(pooled, params)
    return ForwardOutput(fmap, pooled, logits, reps, view_logits)


_GROUP_PATTERNS = (
    re.compile(r"^(stages\.\d+\.blocks\.\d+)\."),
    re.compile(r"^(stages\.\d+\.merge)\."),
    re.compile(r"^(patch_embed|attr_head|viewpoint)\."),
    re.compile(r"^(centers)$"),
    re.compile(r"^(norm)\."),
)


def parameter_group(name: str) -> str:
    for pat in _GROUP_PATTERNS:
        m = pat.match(name)
        if m:
            return m.group(1)
    raise KeyError(f"parameter {name!r} belongs to no group")


def parameter_groups(params: Params) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for name in params:
        groups.setdefault(parameter_group(name), []).append(name)
    return groups
