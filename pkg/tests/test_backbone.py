import numpy as np
import pytest
import torch

from parformer.backbone import (
    MASK_VALUE,
    ModelConfig,
    backbone_forward,
    block_pair,
    embed_patches,
    init_backbone_params,
    merge_regroup,
    patch_merging,
    shift_attention_mask,
    shifted_window_attention,
    window_attention,
    window_partition,
)
from parformer.numerics import ContractError, DimensionError, finite_difference_gradient, relative_error


def _attn_params(rng, c, heads, ws, prefix="a", rel=True):
    p = {
        f"{prefix}.qkv.weight": torch.from_numpy(rng.normal(size=(c, 3 * c))),
        f"{prefix}.qkv.bias": torch.from_numpy(rng.normal(size=3 * c)),
        f"{prefix}.proj.weight": torch.from_numpy(rng.normal(size=(c, c))),
        f"{prefix}.proj.bias": torch.from_numpy(rng.normal(size=c)),
    }
    if rel:
        p[f"{prefix}.rel_bias"] = torch.from_numpy(rng.normal(size=((2 * ws - 1) ** 2, heads)))
    return p


# -- patch embedding -------------------------------------------------------------------------

def test_embed_full_scale_shape(rng):
    cfg = ModelConfig()
    p = init_backbone_params(cfg, rng)
    out = embed_patches(torch.zeros(1, 224, 224, 3, dtype=torch.float64), p, 4)
    assert out.shape == (1, 56, 56, 128)


def test_embed_small_grid_and_zero_image():
    p = {"patch_embed.weight": torch.randn(48, 5, dtype=torch.float64),
         "patch_embed.bias": torch.zeros(5, dtype=torch.float64)}
    out = embed_patches(torch.zeros(2, 8, 8, 3, dtype=torch.float64), p, 4)
    assert out.shape == (2, 2, 2, 5)
    assert torch.count_nonzero(out) == 0


def test_embed_token_is_flattened_patch():
    img = torch.arange(8 * 8 * 3, dtype=torch.float64).reshape(1, 8, 8, 3)
    p = {"patch_embed.weight": torch.eye(48, dtype=torch.float64),
         "patch_embed.bias": torch.zeros(48, dtype=torch.float64)}
    out = embed_patches(img, p, 4)
    assert torch.equal(out[0, 1, 0], img[0, 4:8, 0:4].reshape(-1))


def test_embed_rejects_indivisible():
    with pytest.raises(DimensionError):
        embed_patches(torch.zeros(1, 10, 8, 3), {}, 4)


# -- patch merging ---------------------------------------------------------------------------

def test_merge_order_hand_case():
    x = torch.arange(1, 17, dtype=torch.float64).reshape(1, 4, 4, 1)
    assert merge_regroup(x)[0, 0, 0].tolist() == [1, 5, 2, 6]


def test_merge_full_scale_shape(rng):
    c = 128
    p = {"m.weight": torch.from_numpy(rng.normal(size=(4 * c, 2 * c)))}
    assert patch_merging(torch.zeros(1, 56, 56, c, dtype=torch.float64), p, "m").shape == (1, 28, 28, 256)


def test_merge_identity_projection(rng):
    c = 3
    x = torch.from_numpy(rng.normal(size=(2, 4, 4, c)))
    p = {"m.weight": torch.eye(4 * c, dtype=torch.float64)[:, :2 * c]}
    out = patch_merging(x, p, "m")
    assert torch.equal(out[..., :c], x[:, 0::2, 0::2])
    assert torch.equal(out[..., c:], x[:, 1::2, 0::2])


def test_merge_odd_grid_rejected():
    with pytest.raises(DimensionError):
        merge_regroup(torch.zeros(1, 3, 4, 2))


# -- window attention ------------------------------------------------------------------------

def test_window_count():
    assert window_partition(torch.zeros(1, 56, 56, 4), 7).shape == (64, 49, 4)


def test_singleton_window_returns_value_projection(rng):
    c = 4
    p = _attn_params(rng, c, 1, 1)
    x = torch.from_numpy(rng.normal(size=(1, 1, 1, c)))
    out = window_attention(x, 1, p, "a", 1)
    v = x @ p["a.qkv.weight"][:, 2 * c:] + p["a.qkv.bias"][2 * c:]
    expected = v @ p["a.proj.weight"] + p["a.proj.bias"]
    torch.testing.assert_close(out, expected, rtol=0, atol=1e-12)


def test_identical_tokens_identical_outputs(rng):
    c = 4
    p = _attn_params(rng, c, 2, 2, rel=False)
    tok = torch.from_numpy(rng.normal(size=c))
    x = torch.from_numpy(rng.normal(size=(1, 2, 2, c)))
    x[0, 0, 0] = tok
    x[0, 1, 1] = tok
    out = window_attention(x, 2, p, "a", 2)
    torch.testing.assert_close(out[0, 0, 0], out[0, 1, 1], rtol=0, atol=1e-12)


def test_attention_rows_sum_to_one(rng):
    p = _attn_params(rng, 8, 2, 2)
    x = torch.from_numpy(rng.normal(size=(2, 4, 4, 8)))
    for shift in (0, 1):
        _, w = window_attention(x, 2, p, "a", 2, shift=shift, return_weights=True)
        np.testing.assert_allclose(w.sum(-1).numpy(), 1.0, atol=1e-10)


@pytest.mark.parametrize("shift", [0, 1])
def test_locality_out_of_window_perturbation(rng, shift):
    """Perturbing a token outside t's (shifted) window leaves t's output bit-identical."""
    p = _attn_params(rng, 4, 1, 2)
    x = torch.from_numpy(rng.normal(size=(1, 4, 4, 4)))
    base = window_attention(x, 1, p, "a", 2, shift=shift)
    # in shifted coordinates the window containing grid cell (1,1) is cells {1,2}x{1,2}
    same = {(1, 1), (1, 2), (2, 1), (2, 2)} if shift else {(0, 0), (0, 1), (1, 0), (1, 1)}
    for i in range(4):
        for j in range(4):
            if (i, j) in same:
                continue
            y = x.clone()
            y[0, i, j] += 5.0
            assert torch.equal(window_attention(y, 1, p, "a", 2, shift=shift)[0, 1, 1], base[0, 1, 1])


def test_shift_unshift_is_identity_with_identity_params():
    """Distinct one-hot tokens and sharp self-attention: out == in only if the roll is undone."""
    c = 16
    eye = torch.eye(c, dtype=torch.float64)
    p = {"a.qkv.weight": torch.cat([200 * eye, eye, eye], 1),
         "a.qkv.bias": torch.zeros(3 * c, dtype=torch.float64),
         "a.proj.weight": eye, "a.proj.bias": torch.zeros(c, dtype=torch.float64)}
    x = eye.reshape(1, 4, 4, c)
    out = window_attention(x, 1, p, "a", 2, shift=2)
    torch.testing.assert_close(out, x, rtol=0, atol=1e-9)


def test_shift_mask_zero_cross_weight(rng):
    """4x4 grid, window 2, shift 1: wrap-around pairs get exactly zero weight."""
    p = _attn_params(rng, 4, 1, 2)
    x = torch.from_numpy(rng.normal(size=(1, 4, 4, 4)))
    _, w = shifted_window_attention(x, 1, p, "a", 2, return_weights=True)
    mask = shift_attention_mask(4, 4, 2, 1)
    # brute-force contiguity: token positions in the rolled grid map back to original coords
    coords = [((r + 1) % 4, (c + 1) % 4) for r in range(4) for c in range(4)]
    grid = torch.tensor(coords).reshape(1, 4, 4, 2)
    win = window_partition(grid, 2)
    for k in range(win.shape[0]):
        for a in range(4):
            for b in range(4):
                (r1, c1), (r2, c2) = win[k, a].tolist(), win[k, b].tolist()
                contiguous = abs(r1 - r2) <= 1 and abs(c1 - c2) <= 1
                assert (mask[k, a, b] == 0) == contiguous
                if not contiguous:
                    assert w[k, 0, a, b].item() == 0.0
    assert MASK_VALUE == -1e9


def test_shifted_attention_shape_full_scale(rng):
    c, heads = 128, 4
    p = _attn_params(rng, c, heads, 7)
    x = torch.from_numpy(rng.normal(size=(1, 56, 56, c)) * 0.1)
    assert shifted_window_attention(x, heads, p, "a", 7).shape == (1, 56, 56, c)


def test_window_indivisible_rejected(rng):
    with pytest.raises(DimensionError):
        window_attention(torch.zeros(1, 5, 5, 4, dtype=torch.float64), 1, _attn_params(rng, 4, 1, 2), "a", 2)


# -- blocks ----------------------------------------------------------------------------------

def _toy_block_params(rng, c, heads, cfg):
    from parformer.backbone import init_block_params

    p = {}
    for b in range(2):
        p.update(init_block_params(rng, f"stages.0.blocks.{b}", c, heads, cfg))
    return p


def test_block_pair_identity_when_outputs_zeroed(rng):
    cfg = ModelConfig.toy(embed_dim=8, window_size=2)
    p = _toy_block_params(rng, 8, 2, cfg)
    for k in p:
        if k.endswith(("attn.proj.weight", "attn.proj.bias", "mlp.fc2.weight", "mlp.fc2.bias")):
            p[k] = torch.zeros_like(p[k])
    x = torch.from_numpy(rng.normal(size=(1, 4, 4, 8)))
    assert torch.equal(block_pair(x, 2, p, 0, 0, cfg), x)


def test_block_pair_shape(rng):
    cfg = ModelConfig.toy(embed_dim=16, window_size=7)
    p = _toy_block_params(rng, 16, 2, cfg)
    assert block_pair(torch.zeros(1, 14, 14, 16, dtype=torch.float64), 2, p, 0, 0, cfg).shape == (1, 14, 14, 16)


def test_block_pair_input_gradient_matches_fd(rng):
    cfg = ModelConfig.toy(embed_dim=8, window_size=2)
    p = _toy_block_params(rng, 8, 2, cfg)
    for k in p:  # larger weights than init so the gradient is not dominated by the residual path
        if k.endswith("weight") and "norm" not in k:
            p[k] = p[k] * 20
    x = torch.from_numpy(rng.normal(size=(1, 4, 4, 8))).requires_grad_(True)
    f = lambda v: block_pair(v, 2, p, 0, 0, cfg).mean()
    (g,) = torch.autograd.grad(f(x), x)
    num = finite_difference_gradient(f, x.detach())
    assert relative_error(g, num, floor=1e-6).max() <= 1e-5


# -- full backbone ---------------------------------------------------------------------------

def test_full_scale_shapes():
    cfg = ModelConfig()
    p = init_backbone_params(cfg, np.random.default_rng(0))
    p = {k: v.float() for k, v in p.items()}
    with torch.no_grad():
        out, stages = backbone_forward(torch.rand(1, 224, 224, 3), p, cfg, return_stages=True)
    assert out.shape == (1, 7, 7, 1024)
    assert [tuple(s.shape[1:]) for s in stages] == [(56, 56, 128), (28, 28, 256), (14, 14, 512), (7, 7, 1024)]


def test_toy_shape_and_determinism():
    cfg = ModelConfig.toy()
    x = torch.rand(2, 64, 64, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    outs = []
    for _ in range(2):
        p = init_backbone_params(cfg, np.random.default_rng(7))
        outs.append(backbone_forward(x, p, cfg))
    assert outs[0].shape == (2, 2, 2, 128)
    assert torch.equal(outs[0], outs[1])


def test_stage_law():
    cfg = ModelConfig.toy()
    p = init_backbone_params(cfg, np.random.default_rng(0))
    _, stages = backbone_forward(torch.zeros(1, 64, 64, 3, dtype=torch.float64), p, cfg, return_stages=True)
    for a, b in zip(stages, stages[1:]):
        assert b.shape[-1] == 2 * a.shape[-1] and b.shape[1] * 2 == a.shape[1]


def test_relative_bias_toggle():
    cfg = ModelConfig.toy(use_relative_position_bias=False)
    p = init_backbone_params(cfg, np.random.default_rng(0))
    assert not any(k.endswith("rel_bias") for k in p)
    assert backbone_forward(torch.zeros(1, 64, 64, 3, dtype=torch.float64), p, cfg).shape == (1, 2, 2, 128)


def test_init_conventions():
    p = init_backbone_params(ModelConfig.toy(), np.random.default_rng(0))
    for k, v in p.items():
        if k.endswith("rel_bias") or (k.endswith("bias") and "norm" not in k):
            assert torch.count_nonzero(v) == 0, k
        elif k.endswith("weight") and "norm" not in k:
            assert v.abs().max() <= 0.04 + 1e-12, k


@pytest.mark.parametrize("kw", [
    dict(stage_depths=(2, 3, 2, 2)),
    dict(image_h=60),
    dict(window_size=3),
    dict(heads_per_stage=(3, 2, 4, 8)),
])
def test_config_validation(kw):
    with pytest.raises((ContractError, DimensionError)):
        ModelConfig.toy(**kw).validate()
