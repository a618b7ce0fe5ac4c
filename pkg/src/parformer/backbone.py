"""Four-stage hierarchical windowed-attention backbone.

Feature maps are channel-last tensors of shape ``(batch, grid_h, grid_w, channels)``.
Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names, so the
same dict feeds the forward pass, the optimizer, gradient checks and checkpoints.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from functools import lru_cache

import numpy as np
import torch

from .numerics import DimensionError, ContractError, gelu, layer_norm, linear, softmax, trunc_normal

MASK_VALUE = -1e9

Params = dict[str, torch.Tensor]


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults are the full-scale base model."""

    image_h: int = 224
    image_w: int = 224
    patch_size: int = 4
    embed_dim: int = 128
    stage_depths: tuple[int, ...] = (2, 2, 18, 2)
    heads_per_stage: tuple[int, ...] = (4, 8, 16, 32)
    window_size: int = 7
    mlp_ratio: float = 4.0
    n_attributes: int = 35
    use_relative_position_bias: bool = True
    merge_norm: bool = True
    viewpoint_dim: int = 64
    # input normalization, applied before the backbone; ImageNet statistics at full scale
    pixel_mean: tuple[float, ...] = (0.485, 0.456, 0.406)
    pixel_std: tuple[float, ...] = (0.229, 0.224, 0.225)

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(
            image_h=64, image_w=64, patch_size=4, embed_dim=16,
            stage_depths=(2, 2, 2, 2), heads_per_stage=(1, 2, 4, 8),
            window_size=2, mlp_ratio=4.0, n_attributes=8, viewpoint_dim=64,
            # channel statistics of the default synthetic generator
            pixel_mean=(0.28, 0.28, 0.28), pixel_std=(0.14, 0.14, 0.14),
        )
        base.update(overrides)
        return cls(**base)

    @property
    def feature_dim(self) -> int:
        return self.embed_dim * 2 ** (len(self.stage_depths) - 1)

    def stage_grid(self, stage: int) -> tuple[int, int]:
        div = self.patch_size * 2 ** stage
        return self.image_h // div, self.image_w // div

    def validate(self) -> "ModelConfig":
        if len(self.stage_depths) != 4 or len(self.heads_per_stage) != 4:
            raise ContractError("stage_depths and heads_per_stage need exactly 4 entries")
        if any(d <= 0 or d % 2 for d in self.stage_depths):
            raise ContractError(f"stage depths must be positive and even, got {self.stage_depths}")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise DimensionError(
                f"image {self.image_h}x{self.image_w} not divisible by patch size {self.patch_size}"
            )
        for s in range(4):
            gh, gw = self.stage_grid(s)
            if gh * self.patch_size * 2 ** s != self.image_h or gw * self.patch_size * 2 ** s != self.image_w:
                raise DimensionError(f"stage {s + 1} grid is not an integer for image {self.image_h}x{self.image_w}")
            if gh % self.window_size or gw % self.window_size:
                raise DimensionError(
                    f"stage {s + 1} grid {gh}x{gw} not divisible by window {self.window_size}"
                )
            dim = self.embed_dim * 2 ** s
            if dim % self.heads_per_stage[s]:
                raise DimensionError(f"stage {s + 1}: {dim} channels not divisible by {self.heads_per_stage[s]} heads")
        if len(self.pixel_mean) != 3 or len(self.pixel_std) != 3 or min(self.pixel_std) <= 0:
            raise ContractError("pixel_mean and pixel_std need 3 entries, with positive std")
        if self.viewpoint_dim < 2:
            raise ContractError("viewpoint_dim must be >= 2")
        return self


def _linear_params(rng, prefix: str, d_in: int, d_out: int, bias: bool = True) -> Params:
    out = {f"{prefix}.weight": torch.from_numpy(trunc_normal(rng, (d_in, d_out)))}
    if bias:
        out[f"{prefix}.bias"] = torch.zeros(d_out, dtype=torch.float64)
    return out


def _norm_params(prefix: str, d: int) -> Params:
    return {
        f"{prefix}.weight": torch.ones(d, dtype=torch.float64),
        f"{prefix}.bias": torch.zeros(d, dtype=torch.float64),
    }


def init_block_params(rng: np.random.Generator, prefix: str, dim: int, heads: int, cfg: ModelConfig) -> Params:
    p: Params = {}
    p.update(_norm_params(f"{prefix}.norm1", dim))
    p.update(_linear_params(rng, f"{prefix}.attn.qkv", dim, 3 * dim))
    p.update(_linear_params(rng, f"{prefix}.attn.proj", dim, dim))
    if cfg.use_relative_position_bias:
        p[f"{prefix}.attn.rel_bias"] = torch.zeros((2 * cfg.window_size - 1) ** 2, heads, dtype=torch.float64)
    p.update(_norm_params(f"{prefix}.norm2", dim))
    hidden = int(dim * cfg.mlp_ratio)
    p.update(_linear_params(rng, f"{prefix}.mlp.fc1", dim, hidden))
    p.update(_linear_params(rng, f"{prefix}.mlp.fc2", hidden, dim))
    return p


def init_backbone_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    """Draw backbone parameters in a fixed order from ``rng`` (float64)."""
    cfg.validate()
    p: Params = {}
    patch_in = cfg.patch_size * cfg.patch_size * 3
    p.update(_linear_params(rng, "patch_embed", patch_in, cfg.embed_dim))
    p.update(_norm_params("patch_embed.norm", cfg.embed_dim))
    for s in range(4):
        dim = cfg.embed_dim * 2 ** s
        if s > 0:
            if cfg.merge_norm:
                p.update(_norm_params(f"stages.{s}.merge.norm", 2 * dim))
            p.update(_linear_params(rng, f"stages.{s}.merge", 2 * dim, dim, bias=False))
        for b in range(cfg.stage_depths[s]):
            p.update(init_block_params(rng, f"stages.{s}.blocks.{b}", dim, cfg.heads_per_stage[s], cfg))
    p.update(_norm_params("norm", cfg.feature_dim))
    return p


def embed_patches(images: torch.Tensor, params: Params, patch_size: int) -> torch.Tensor:
    """``(B, H, W, 3)`` images to ``(B, H/p, W/p, C)`` tokens via a shared linear map."""
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    patches = (
        images.reshape(b, gh, patch_size, gw, patch_size, c)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(b, gh, gw, patch_size * patch_size * c)
    )
    tokens = linear(patches, params["patch_embed.weight"], params["patch_embed.bias"])
    if "patch_embed.norm.weight" in params:
        tokens = layer_norm(tokens, params["patch_embed.norm.weight"], params["patch_embed.norm.bias"])
    return tokens


def merge_regroup(x: torch.Tensor) -> torch.Tensor:
    """Stack the four stride-2 sub-grids along channels: ``(B, h, w, C) -> (B, h/2, w/2, 4C)``.

    Order: (even row, even col), (odd row, even col), (even row, odd col), (odd row, odd col).
    """
    h, w = x.shape[1], x.shape[2]
    if h % 2 or w % 2:
        raise DimensionError(f"patch merging needs even grid sides, got {h}x{w}")
    x0 = x[:, 0::2, 0::2]
    x1 = x[:, 1::2, 0::2]
    x2 = x[:, 0::2, 1::2]
    x3 = x[:, 1::2, 1::2]
    return torch.cat([x0, x1, x2, x3], dim=-1)


def patch_merging(x: torch.Tensor, params: Params, prefix: str) -> torch.Tensor:
    """Regroup stride-2 sub-grids into 4C channels, optionally normalize, project to 2C."""
    merged = merge_regroup(x)
    if f"{prefix}.norm.weight" in params:
        merged = layer_norm(merged, params[f"{prefix}.norm.weight"], params[f"{prefix}.norm.bias"])
    return linear(merged, params[f"{prefix}.weight"])


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    b, h, w, c = x.shape
    x = x.reshape(b, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b * (h // ws) * (w // ws), ws * ws, c)


def window_reverse(windows: torch.Tensor, ws: int, b: int, h: int, w: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.reshape(b, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


@lru_cache(maxsize=None)
def relative_position_index(ws: int) -> torch.Tensor:
    """``(ws*ws, ws*ws)`` index into the ``(2ws-1)^2`` offset table."""
    coords = np.stack(np.meshgrid(np.arange(ws), np.arange(ws), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + (ws - 1)
    return torch.from_numpy(rel[0] * (2 * ws - 1) + rel[1])


@lru_cache(maxsize=None)
def shift_region_ids(h: int, w: int, ws: int, shift: int) -> torch.Tensor:
    """Per-token region label of the shifted grid; tokens from different regions were not contiguous."""
    img = np.zeros((h, w), dtype=np.int64)
    cnt = 0
    bands = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
    for hs in bands:
        for wsl in bands:
            img[hs, wsl] = cnt
            cnt += 1
    return torch.from_numpy(img)


@lru_cache(maxsize=None)
def shift_attention_mask(h: int, w: int, ws: int, shift: int) -> torch.Tensor:
    """``(num_windows, ws*ws, ws*ws)`` additive mask: 0 within a region, MASK_VALUE across."""
    ids = shift_region_ids(h, w, ws, shift)[None, :, :, None]
    win = window_partition(ids, ws).squeeze(-1)
    diff = win[:, :, None] != win[:, None, :]
    return torch.where(diff, torch.tensor(MASK_VALUE), torch.tensor(0.0)).to(torch.float64)


def window_attention(
    x: torch.Tensor,
    heads: int,
    params: Params,
    prefix: str,
    window_size: int,
    shift: int = 0,
    return_weights: bool = False,
):
    """Multi-head self-attention restricted to ``window_size`` x ``window_size`` windows.

    With ``shift > 0`` the grid is rolled by ``-shift`` first, wrap-around pairs
    are masked, and the roll is undone afterwards.
    """
    b, h, w, c = x.shape
    ws = window_size
    if h % ws or w % ws:
        raise DimensionError(f"grid {h}x{w} not divisible by window {ws}")
    if c % heads:
        raise DimensionError(f"{c} channels not divisible by {heads} heads")
    if shift:
        x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
    win = window_partition(x, ws)
    nw_total, n, _ = win.shape
    dh = c // heads

    qkv = linear(win, params[f"{prefix}.qkv.weight"], params[f"{prefix}.qkv.bias"])
    qkv = qkv.reshape(nw_total, n, 3, heads, dh).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(-2, -1)) * dh ** -0.5

    bias_key = f"{prefix}.rel_bias"
    if bias_key in params:
        table = params[bias_key]
        idx = relative_position_index(ws).reshape(-1)
        bias = table[idx].reshape(n, n, heads).permute(2, 0, 1)
        scores = scores + bias[None]
    if shift:
        mask = shift_attention_mask(h, w, ws, shift).to(scores.dtype)
        nw = mask.shape[0]
        scores = scores.reshape(b, nw, heads, n, n) + mask[None, :, None]
        scores = scores.reshape(nw_total, heads, n, n)

    attn = softmax(scores, dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(nw_total, n, c)
    out = linear(out, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"])
    out = window_reverse(out, ws, b, h, w)
    if shift:
        out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
    if return_weights:
        return out, attn
    return out


def shifted_window_attention(x, heads, params, prefix, window_size, return_weights=False):
    return window_attention(
        x, heads, params, prefix, window_size, shift=window_size // 2, return_weights=return_weights
    )


def transformer_block(x: torch.Tensor, heads: int, params: Params, prefix: str, cfg: ModelConfig, shift: int):
    y = layer_norm(x, params[f"{prefix}.norm1.weight"], params[f"{prefix}.norm1.bias"])
    x = x + window_attention(y, heads, params, f"{prefix}.attn", cfg.window_size, shift=shift)
    y = layer_norm(x, params[f"{prefix}.norm2.weight"], params[f"{prefix}.norm2.bias"])
    y = linear(y, params[f"{prefix}.mlp.fc1.weight"], params[f"{prefix}.mlp.fc1.bias"])
    y = linear(gelu(y), params[f"{prefix}.mlp.fc2.weight"], params[f"{prefix}.mlp.fc2.bias"])
    return x + y


def block_pair(x: torch.Tensor, heads: int, params: Params, stage: int, pair: int, cfg: ModelConfig):
    """Regular-window block followed by shifted-window block."""
    x = transformer_block(x, heads, params, f"stages.{stage}.blocks.{2 * pair}", cfg, shift=0)
    return transformer_block(
        x, heads, params, f"stages.{stage}.blocks.{2 * pair + 1}", cfg, shift=cfg.window_size // 2
    )


def backbone_forward(images: torch.Tensor, params: Params, cfg: ModelConfig, return_stages: bool = False):
    """``(B, H, W, 3)`` images to the final ``(B, H/32, W/32, 8C)`` feature map."""
    if images.dim() != 4 or images.shape[-1] != 3:
        raise DimensionError(f"expected (B, H, W, 3) images, got {tuple(images.shape)}")
    x = embed_patches(images, params, cfg.patch_size)
    stages = []
    for s in range(4):
        if s > 0:
            x = patch_merging(x, params, f"stages.{s}.merge")
        for pair in range(cfg.stage_depths[s] // 2):
            x = block_pair(x, cfg.heads_per_stage[s], params, s, pair, cfg)
        stages.append(x)
    x = layer_norm(x, params["norm.weight"], params["norm.bias"])
    if return_stages:
        return x, stages
    return x
