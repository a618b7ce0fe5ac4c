import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from parformer.numerics import (
    ContractError,
    DimensionError,
    cosine_similarity,
    finite_difference_gradient,
    gelu,
    global_average_pool,
    layer_norm,
    linear,
    relative_error,
    softmax,
    trunc_normal,
)
from parformer.recognition import LossConfig, asl_loss

from conftest import t64


# -- hand examples ---------------------------------------------------------------------------

@pytest.mark.parametrize("x,W,b,expected", [
    ([1, 2], np.eye(2), [0, 0], [1, 2]),
    ([1, 1], [[1, 0], [0, 1]], [3, 4], [4, 5]),
    ([2, 3], [[1], [1]], [0], [5]),
])
def test_linear_examples(x, W, b, expected):
    assert torch.equal(linear(t64(x), t64(W), t64(b)), t64(expected))


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3,\).*\(2, 2\)"):
        linear(t64([1, 2, 3]), t64(np.eye(2)), t64([0, 0]))


@pytest.mark.parametrize("x,g,b,eps,expected", [
    ([7.0, 7.0, 7.0], [1, 1, 1], [0, 0, 0], 1e-5, [0, 0, 0]),
    ([1, -1], [1, 1], [0, 0], 0.0, [1, -1]),
    ([0, 2], [2, 2], [1, 1], 0.0, [-1, 3]),
])
def test_layer_norm_examples(x, g, b, eps, expected):
    out = layer_norm(t64(x), t64(g), t64(b), eps=eps)
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-12)


@pytest.mark.parametrize("x,expected", [
    ([0, 0], [0.5, 0.5]),
    ([1000, 1000], [0.5, 0.5]),
    ([0, math.log(3)], [0.25, 0.75]),
])
def test_softmax_examples(x, expected):
    np.testing.assert_allclose(softmax(t64(x)).numpy(), expected, atol=1e-15)


def test_global_average_pool_examples():
    v = t64([[[1.0, 2.0, 3.0]]])
    assert torch.equal(global_average_pool(v), v[0, 0])
    x = t64([1, 2, 3, 4]).reshape(2, 2, 1)
    assert global_average_pool(x).item() == 2.5
    assert torch.equal(global_average_pool(torch.zeros(7, 7, 8)), torch.zeros(8))


@pytest.mark.parametrize("a,b,expected", [
    ([2, 3], [2, 3], 1.0),
    ([1, 0], [0, 1], 0.0),
    ([1, 1], [1, 0], 0.70710678),
])
def test_cosine_similarity_examples(a, b, expected):
    assert cosine_similarity(t64(a), t64(b)).item() == pytest.approx(expected, abs=1e-8)


def test_cosine_similarity_zero_vector_is_finite():
    assert cosine_similarity(t64([0, 0]), t64([1, 0])).item() == 0.0


def test_fd_square():
    g = finite_difference_gradient(lambda x: (x ** 2).sum(), t64([3.0]))
    assert abs(g.item() - 6.0) < 1e-7


def test_fd_sum_is_all_ones(rng):
    x = t64(rng.normal(size=(3, 4)) * 10)
    g = finite_difference_gradient(lambda v: v.sum(), x)
    np.testing.assert_allclose(g.numpy(), 1.0, atol=1e-6)


def test_fd_on_asl_matches_analytic(rng):
    cfg = LossConfig()
    y = t64(rng.integers(0, 2, size=(2, 3)))
    p = t64(rng.uniform(0.05, 0.95, size=(2, 3))).requires_grad_(True)
    (g,) = torch.autograd.grad(asl_loss(p, y, cfg), p)
    num = finite_difference_gradient(lambda q: asl_loss(q, y, cfg), p)
    assert relative_error(g, num).max() <= 1e-6


def test_fd_rejects_non_scalar():
    with pytest.raises(ContractError):
        finite_difference_gradient(lambda x: x * 2, t64([1.0, 2.0]))


def test_fd_index_subset_leaves_nan_elsewhere():
    g = finite_difference_gradient(lambda x: (x ** 2).sum(), t64([1.0, 2.0, 3.0]), indices=np.array([1]))
    assert math.isnan(g[0]) and math.isnan(g[2])
    assert g[1].item() == pytest.approx(4.0, abs=1e-7)


def test_trunc_normal_bounds():
    w = trunc_normal(np.random.default_rng(0), (200, 50), std=0.02)
    assert np.abs(w).max() <= 0.04
    assert abs(w.std() - 0.02) < 0.003


# -- properties ------------------------------------------------------------------------------

finite = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_simplex(x):
    out = softmax(torch.from_numpy(x))
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(-1).numpy(), 1.0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-100, 100)))
def test_layer_norm_moments(x):
    spread = x.max(-1) - x.min(-1)
    x = x[spread > 1e-3]
    if not len(x):
        return
    d = x.shape[-1]
    out = layer_norm(torch.from_numpy(x), torch.ones(d, dtype=torch.float64), torch.zeros(d, dtype=torch.float64),
                     eps=0.0).numpy()
    assert np.abs(out.mean(-1)).max() <= 1e-10
    np.testing.assert_allclose(out.var(-1), 1.0, atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(-10, 10)), arrays(np.float64, 4, elements=st.floats(-10, 10)),
       st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_cosine_symmetry_and_scale(a, b, alpha, beta):
    if np.linalg.norm(a) < 1e-3 or np.linalg.norm(b) < 1e-3:
        return
    a, b = torch.from_numpy(a), torch.from_numpy(b)
    s = cosine_similarity(a, b).item()
    assert s == pytest.approx(cosine_similarity(b, a).item(), abs=1e-12)
    assert s == pytest.approx(cosine_similarity(alpha * a, beta * b).item(), abs=1e-12)


# -- gradients at 100 random points ----------------------------------------------------------

def _check_grad(f, x, tol=1e-5):
    x = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    num = finite_difference_gradient(f, x.detach())
    assert relative_error(g, num, floor=1e-6).max() <= tol


@pytest.mark.parametrize("seed", range(100))
def test_op_gradients_random_points(seed):
    r = np.random.default_rng(seed)
    x = t64(r.normal(size=(2, 4)))
    W, b = t64(r.normal(size=(4, 3))), t64(r.normal(size=3))
    g, beta = t64(r.normal(size=4)), t64(r.normal(size=4))
    w = t64(r.normal(size=(2, 4)))
    _check_grad(lambda v: (linear(v, W, b) ** 2).sum(), x)
    _check_grad(lambda v: (layer_norm(v, g, beta) * w).sum(), x)
    _check_grad(lambda v: (softmax(v) * w).sum(), x)
    _check_grad(lambda v: (gelu(v) * w).sum(), x)
    _check_grad(lambda v: (global_average_pool(v.reshape(2, 2, 2)) * w[0, :2]).sum(), x)
    _check_grad(lambda v: cosine_similarity(v[0], v[1]), x)
