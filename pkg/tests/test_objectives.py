import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gazeaqa.gradcheck import numeric_grad, relative_error
from gazeaqa.objectives import (HybridLossConfig, hybrid_loss, hybrid_loss_torch, mse, plcc_differentiable,
                                plcc_torch)


def pearson_oracle(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / (va ** 0.5 * vb ** 0.5)


def test_mse_examples():
    y = np.array([1.0, 2.0, 3.5])
    assert mse(y, y).value == 0.0
    assert mse(y + 1, y).value == 1.0
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=7), rng.normal(size=7)
    oracle = sum((a - b) ** 2 for a, b in zip(p, t)) / 7
    assert abs(mse(p, t).value - oracle) <= 1e-12


def test_plcc_examples():
    rng = np.random.default_rng(1)
    y = rng.normal(size=20)
    eps = 1e-8
    s = float(((y - y.mean()) ** 2).sum())

    def guarded(a):
        # exact value of the eps-guarded correlation of a*y + b with y
        return a * s / (np.sqrt(a * a * s + eps) * np.sqrt(s + eps))

    assert abs(plcc_differentiable(y, y, eps).value - guarded(1.0)) <= 1e-12
    assert abs(plcc_differentiable(y, y, eps).value - 1.0) <= 1e-8
    assert abs(plcc_differentiable(3.0 * y + 2.0, y, eps).value - guarded(3.0)) <= 1e-12
    assert abs(plcc_differentiable(-0.5 * y + 7.0, y, eps).value - guarded(-0.5)) <= 1e-12
    assert abs(plcc_differentiable(3.0 * y + 2.0, y, 1e-300).value - 1.0) <= 1e-12
    assert abs(plcc_differentiable(-0.5 * y + 7.0, y, 1e-300).value + 1.0) <= 1e-12


def test_plcc_gradient_random_n9():
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=9), rng.normal(size=9)
    res = plcc_differentiable(p, t)
    num = numeric_grad(lambda x: plcc_differentiable(x, t).value, p)
    assert relative_error(res.grad, num).max() <= 1e-6


def test_plcc_degenerate_flagged_not_nan():
    res = plcc_differentiable(np.full(5, 2.0), np.arange(5.0))
    assert res.degenerate
    assert res.value == 0.0
    assert np.all(np.isfinite(res.grad))


def test_plcc_needs_two_samples():
    with pytest.raises(ValueError):
        plcc_differentiable([1.0], [2.0])


def test_hybrid_examples():
    y = np.random.default_rng(2).normal(size=50)
    y = (y - y.mean()) / y.std()
    assert abs(hybrid_loss(y, y).value) <= 1e-8
    anti = hybrid_loss(-y, y, HybridLossConfig(lam=0.5))
    assert abs(anti.value - 5.0) <= 1e-8


def test_hybrid_random_n16_matches_composed_oracle():
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=16), rng.normal(size=16)
    res = hybrid_loss(p, t, HybridLossConfig(lam=0.5))
    oracle = sum((a - b) ** 2 for a, b in zip(p, t)) / 16 + 0.5 * (1 - pearson_oracle(list(p), list(t)))
    # eps under the square roots shifts the correlation by O(eps / variance)
    assert abs(res.value - oracle) <= 1e-8
    res0 = hybrid_loss(p, t, HybridLossConfig(lam=0.5, eps=1e-300))
    assert abs(res0.value - oracle) <= 1e-12
    num = numeric_grad(lambda x: hybrid_loss(x, t).value, p)
    assert relative_error(res.grad, num).max() <= 1e-6


def test_torch_twins_agree():
    rng = np.random.default_rng(3)
    p, t = rng.normal(size=12), rng.normal(size=12)
    pt, tt = torch.tensor(p, requires_grad=True), torch.tensor(t)
    loss = hybrid_loss_torch(pt, tt)
    loss.backward()
    ref = hybrid_loss(p, t)
    assert abs(loss.item() - ref.value) <= 1e-12
    assert np.allclose(pt.grad.numpy(), ref.grad, atol=1e-12)
    assert abs(plcc_torch(pt.detach(), tt).item() - plcc_differentiable(p, t).value) <= 1e-12


vectors = st.integers(2, 30).flatmap(lambda n: st.tuples(
    arrays(np.float64, n, elements=st.floats(-100, 100)), arrays(np.float64, n, elements=st.floats(-100, 100))))


@given(vectors, st.floats(0.0, 3.0))
def test_hybrid_nonnegative_and_lambda_zero_is_mse(pt, lam):
    p, t = pt
    res = hybrid_loss(p, t, HybridLossConfig(lam=lam))
    assert res.value >= -1e-12
    assert np.all(np.isfinite(res.grad))
    assert hybrid_loss(p, t, HybridLossConfig(lam=0.0)).value == mse(p, t).value


@given(st.integers(3, 30), st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-50, 50))
def test_plcc_positive_affine_invariance(n, seed, scale, shift):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=n), rng.normal(size=n)
    exact = lambda a, b: plcc_differentiable(a, b, 1e-300).value
    base = exact(p, t)
    assert abs(exact(scale * p + shift, t) - base) <= 1e-7
    assert abs(exact(p, scale * t + shift) - base) <= 1e-7
    # with the default guard the deviation is bounded by the eps perturbation of the norms
    ss = min(((scale * (p - p.mean())) ** 2).sum(), ((scale * (t - t.mean())) ** 2).sum(),
             ((p - p.mean()) ** 2).sum(), ((t - t.mean()) ** 2).sum())
    bound = 1e-7 + 2e-8 / ss
    assert abs(plcc_differentiable(scale * p + shift, t).value - plcc_differentiable(p, t).value) <= bound
    assert abs(plcc_differentiable(p, scale * t + shift).value - plcc_differentiable(p, t).value) <= bound


@given(st.integers(2, 30), st.integers(0, 10_000))
def test_plcc_gradient_annihilates_shifts(n, seed):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=n), rng.normal(size=n)
    g = plcc_differentiable(p, t).grad
    assert abs(g.sum()) <= 1e-7


@given(st.integers(2, 12), st.integers(0, 10_000))
def test_gradients_finite_with_duplicates(n, seed):
    rng = np.random.default_rng(seed)
    p = np.repeat(rng.normal(size=1), n)
    t = rng.integers(0, 2, size=n).astype(float)
    res = hybrid_loss(p, t)
    assert np.all(np.isfinite(res.grad))


def test_hybrid_gradient_suite_20_instances():
    rng = np.random.default_rng(20)
    for _ in range(20):
        n = int(rng.integers(2, 30))
        p, t = rng.normal(size=n), rng.normal(size=n)
        for fn in (lambda x: plcc_differentiable(x, t), lambda x: hybrid_loss(x, t)):
            num = numeric_grad(lambda x: fn(x).value, p)
            assert relative_error(fn(p).grad, num).max() <= 1e-6
