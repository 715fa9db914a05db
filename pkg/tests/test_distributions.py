import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import integrate, special, stats

from oracles import fd_grads, rel_err, tape_grad
from susl import diffcore as dc
from susl import distributions as D


def G(mean, logvar):
    return D.DiagGaussian(np.asarray(mean, float), np.asarray(logvar, float))


# --- gaussian_logpdf --------------------------------------------------------------

def test_logpdf_trivial_values():
    assert float(D.gaussian_logpdf([0.0], G([0.0], [0.0])).values) == pytest.approx(-0.9189385, abs=1e-7)
    mu = [0.7, -3.1]
    assert float(D.gaussian_logpdf(mu, G(mu, [0.0, 0.0])).values) == pytest.approx(-1.8378771, abs=1e-7)


def test_logpdf_matches_scipy_and_normalises():
    rng = np.random.default_rng(0)
    for _ in range(20):
        d = rng.integers(1, 5)
        x, mu, lv = rng.normal(size=d), rng.normal(size=d), rng.uniform(-2, 2, d)
        ours = float(D.gaussian_logpdf(x, G(mu, lv)).values)
        ref = stats.multivariate_normal(mu, np.diag(np.exp(lv))).logpdf(x)
        assert abs(ours - ref) < 1e-9
    # 1-d density integrates to one
    mu, lv = 0.3, math.log(0.7)
    dens = lambda t: math.exp(float(D.gaussian_logpdf([t], G([mu], [lv])).values))
    total, _ = integrate.quad(dens, -np.inf, np.inf, epsabs=1e-12)
    assert abs(total - 1) < 1e-9


def test_logpdf_shape_mismatch():
    with pytest.raises(dc.ShapeError):
        D.gaussian_logpdf(np.zeros(3), G(np.zeros(2), np.zeros(2)))
    with pytest.raises(dc.ShapeError):
        G(np.zeros(2), np.zeros(3))


# --- KL ---------------------------------------------------------------------------

def test_kl_trivial_values():
    assert float(D.kl_diag_gaussians(G(np.zeros(3), np.zeros(3)), G(np.zeros(3), np.zeros(3))).values) == 0.0
    assert float(D.kl_diag_gaussians(G([1.0], [0.0]), G([0.0], [0.0])).values) == pytest.approx(0.5, abs=1e-15)
    assert float(D.kl_diag_gaussian_std_normal(G([1.0], [0.0])).values) == pytest.approx(0.5, abs=1e-15)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(1)
    mq, lq, mp, lp = rng.normal(size=3), rng.uniform(-1, 1, 3), rng.normal(size=3), rng.uniform(-1, 1, 3)
    exact = float(D.kl_diag_gaussians(G(mq, lq), G(mp, lp)).values)
    z = mq + np.exp(0.5 * lq) * rng.standard_normal((10**6, 3))
    q = stats.norm(mq, np.exp(0.5 * lq)).logpdf(z).sum(axis=1)
    p = stats.norm(mp, np.exp(0.5 * lp)).logpdf(z).sum(axis=1)
    ratio = q - p
    se = ratio.std() / math.sqrt(len(ratio))
    assert abs(ratio.mean() - exact) < 3 * se


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, (4, 3), elements=st.floats(-5, 5)))
def test_kl_nonnegative_and_zero_only_at_equality(a):
    q, p = G(a[0], a[1]), G(a[2], a[3])
    assert float(D.kl_diag_gaussians(q, p).values) >= 0
    assert float(D.kl_diag_gaussians(q, q).values) == pytest.approx(0.0, abs=1e-12)
    bumped = G(a[0] + 1e-3, a[1])
    assert float(D.kl_diag_gaussians(bumped, q).values) > 0


def test_kl_gradients():
    rng = np.random.default_rng(2)
    args = [rng.uniform(-2, 2, (2, 3)) for _ in range(4)]
    f = lambda a, b, c, d: dc.sum_(D.kl_diag_gaussians(D.DiagGaussian(a, b), D.DiagGaussian(c, d)))
    for g, n in zip(tape_grad(f, *args), fd_grads(f, *args)):
        assert rel_err(g, n) < 1e-4


# --- reparameterisation --------------------------------------------------------------

def test_reparam_trivial():
    mu = np.array([0.5, -2.0])
    assert np.array_equal(D.reparam_sample(G(mu, [0.3, -0.1]), np.zeros(2)).values, mu)
    eps = np.array([1.3, -0.4])
    assert np.array_equal(D.reparam_sample(G([0.0, 0.0], [0.0, 0.0]), eps).values, eps)


def test_reparam_moments():
    rng = np.random.default_rng(3)
    mu, lv = np.array([1.5, -0.5]), np.array([0.4, -1.0])
    n = 10**5
    s = D.reparam_sample(G(np.tile(mu, (n, 1)), np.tile(lv, (n, 1))), rng.standard_normal((n, 2))).values
    var = np.exp(lv)
    assert np.all(np.abs(s.mean(0) - mu) < 3 * np.sqrt(var / n))
    # SE of the sample variance for a Gaussian is var * sqrt(2 / (n - 1))
    assert np.all(np.abs(s.var(0, ddof=1) - var) < 3 * var * math.sqrt(2 / (n - 1)))


def test_reparam_gradient_reaches_parameters_not_noise():
    eps = np.array([0.7, -1.1])
    with dc.Tape() as tape:
        mu, lv = dc.leaf(np.zeros(2)), dc.leaf(np.array([0.2, -0.4]))
        noise = dc.leaf(eps)
        tape.backward(dc.sum_(D.reparam_sample(D.DiagGaussian(mu, lv), noise)))
    assert np.array_equal(mu.grad, np.ones(2))
    assert np.allclose(lv.grad, 0.5 * np.exp(0.5 * lv.values) * eps)
    assert np.array_equal(noise.grad, np.zeros(2))


# --- Gumbel-Softmax ---------------------------------------------------------------------

def test_gumbel_softmax_symmetry_and_limit():
    p = D.CategoricalParams.from_probs(np.full(4, 0.25))
    out = D.gumbel_softmax_sample(p, 0.7, np.full(4, 0.3)).values
    assert np.allclose(out, 0.25, rtol=0, atol=1e-15)
    rng = np.random.default_rng(4)
    p = D.CategoricalParams.from_logits(rng.normal(size=5))
    u = rng.uniform(size=5)
    hot = D.gumbel_softmax_sample(p, 1e-4, u).values
    k = np.argmax(p.log_probs.values + D.gumbel_noise(u))
    assert np.max(np.abs(hot - np.eye(5)[k])) < 1e-3


def test_gumbel_max_frequencies():
    rng = np.random.default_rng(5)
    pi = np.array([0.2, 0.5, 0.3])
    n = 10**5
    params = D.CategoricalParams.from_probs(np.tile(pi, (n, 1)))
    y = D.gumbel_softmax_sample(params, 0.5, rng.uniform(size=(n, 3))).values
    freq = np.bincount(y.argmax(1), minlength=3) / n
    assert np.all(np.abs(freq - pi) < 3 * np.sqrt(pi * (1 - pi) / n))


def test_gumbel_softmax_contracts():
    p = D.CategoricalParams.from_probs(np.full(3, 1 / 3))
    for tau in (0.0, -1.0):
        with pytest.raises(D.ContractError):
            D.gumbel_softmax_sample(p, tau, np.full(3, 0.5))
    for bad in (0.0, 1.0):
        with pytest.raises(D.ContractError):
            D.gumbel_softmax_sample(p, 0.5, np.array([0.5, bad, 0.5]))


@settings(max_examples=100, deadline=None)
@given(logits=hnp.arrays(np.float64, (6,), elements=st.floats(-8, 8)),
       u=hnp.arrays(np.float64, (6,), elements=st.floats(1e-6, 1 - 1e-6)),
       tau=st.floats(0.2, 5.0))
def test_gumbel_softmax_on_simplex(logits, u, tau):
    y = D.gumbel_softmax_sample(D.CategoricalParams.from_logits(logits), tau, u).values
    assert abs(y.sum() - 1) <= 1e-9
    assert np.all((y >= 0) & (y <= 1))


def test_gumbel_softmax_gradient():
    rng = np.random.default_rng(6)
    logits, u = rng.uniform(-2, 2, (3, 4)), rng.uniform(0.05, 0.95, (3, 4))
    w = rng.normal(size=(3, 4))
    f = lambda z: dc.sum_(dc.mul(D.gumbel_softmax_sample(D.CategoricalParams.from_logits(z), 0.5, u), w))
    assert rel_err(tape_grad(f, logits)[0], fd_grads(f, logits)[0]) < 1e-4


# --- likelihoods and entropy -----------------------------------------------------------------

def test_bernoulli_trivial():
    assert float(D.bernoulli_loglik([1.0], [0.5]).values) == pytest.approx(-0.6931472, abs=1e-7)
    eps = 1e-12
    assert abs(float(D.bernoulli_loglik([1.0, 0.0], [1 - eps, eps]).values)) < 1e-9
    with pytest.raises(D.ContractError):
        D.bernoulli_loglik([0.5], [0.5])


def test_bernoulli_matches_scipy():
    rng = np.random.default_rng(7)
    x = (rng.uniform(size=(5, 30)) < 0.4).astype(float)
    p = rng.uniform(0.01, 0.99, (5, 30))
    ours = D.bernoulli_loglik(x, p).values
    assert np.max(np.abs(ours - stats.bernoulli.logpmf(x, p).sum(1))) < 1e-12


def test_fixed_gaussian_loglik_matches_scipy():
    rng = np.random.default_rng(8)
    x, m = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    ours = D.fixed_gaussian_loglik(x, m, 0.01).values
    assert np.allclose(ours, stats.norm(m, 0.01).logpdf(x).sum(1), rtol=1e-12)
    with pytest.raises(D.ContractError):
        D.LikelihoodSpec("gaussian", 0.0)


def test_entropy_values():
    assert np.all(D.categorical_entropy(np.eye(4)) == 0)
    assert D.categorical_entropy(np.full(45, 1 / 45)) == pytest.approx(3.8067, abs=1e-4)
    rng = np.random.default_rng(9)
    p = rng.dirichlet(np.ones(7), size=10)
    assert np.max(np.abs(D.categorical_entropy(p) - stats.entropy(p, axis=1))) < 1e-12


def test_categorical_from_logits_normalised():
    rng = np.random.default_rng(10)
    c = D.CategoricalParams.from_logits(rng.uniform(-30, 30, (50, 9)))
    assert np.all(np.abs(c.probs.values.sum(1) - 1) <= 1e-9)
    assert np.allclose(c.log_probs.values, special.log_softmax(c.log_probs.values, axis=1))


def test_log_densities_finite_under_fuzz():
    rng = np.random.default_rng(11)
    n = 10**4
    x = (rng.uniform(size=(n, 3)) < 0.5).astype(float)
    p = rng.choice([0.0, 1.0, 1e-300, 0.5], size=(n, 3))
    assert np.all(np.isfinite(D.bernoulli_loglik(x, p).values))
    mu, lv = rng.uniform(-50, 50, (n, 3)), rng.uniform(-20, 20, (n, 3))
    assert np.all(np.isfinite(D.gaussian_logpdf(rng.uniform(-50, 50, (n, 3)), G(mu, lv)).values))
    assert np.all(np.isfinite(D.kl_diag_gaussians(G(mu, lv), G(mu[::-1], lv[::-1])).values))
    probs = rng.dirichlet(np.full(5, 0.05), size=n)
    assert np.all(np.isfinite(D.categorical_entropy(probs)))
