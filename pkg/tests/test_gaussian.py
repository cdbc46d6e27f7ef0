import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dsv.errors import ContractViolation
from dsv.gaussian import (
    DiagGaussian,
    gaussian_log_prob,
    kl_diag_gaussians,
    log_prior_mu2,
    reparam_sample,
)


def G(mean, logvar):
    return DiagGaussian(torch.tensor(mean, dtype=torch.float64), torch.tensor(logvar, dtype=torch.float64))


def mc_kl(q, p, n, seed):
    """E_q[log q - log p] from n samples, evaluated with scipy-free numpy."""
    rng = np.random.default_rng(seed)
    mq, sq = q.mean.numpy(), np.exp(0.5 * q.logvar.numpy())
    mp, sp = p.mean.numpy(), np.exp(0.5 * p.logvar.numpy())
    x = mq + sq * rng.standard_normal((n, len(mq)))
    logq = -0.5 * (((x - mq) / sq) ** 2 + 2 * np.log(sq) + np.log(2 * np.pi)).sum(1)
    logp = -0.5 * (((x - mp) / sp) ** 2 + 2 * np.log(sp) + np.log(2 * np.pi)).sum(1)
    return float(np.mean(logq - logp))


def test_kl_identity_is_zero():
    g = G([0.3, -1.2], [0.1, 0.5])
    assert float(kl_diag_gaussians(g, g)) == 0.0


@pytest.mark.parametrize("q,p,expected", [
    (([1.0], [0.0]), ([0.0], [0.0]), 0.5),
    (([0.0], [0.0]), ([0.0], [math.log(4.0)]), 0.5 * (math.log(4.0) + 0.25 - 1.0)),
])
def test_kl_matches_monte_carlo(q, p, expected):
    q, p = G(*q), G(*p)
    oracle = mc_kl(q, p, 10**6, seed=1)
    assert abs(oracle - expected) < 1e-2
    assert float(kl_diag_gaussians(q, p)) == pytest.approx(oracle, abs=1e-2)
    assert float(kl_diag_gaussians(q, p)) == pytest.approx(expected, abs=1e-12)


def test_kl_dimension_mismatch():
    with pytest.raises(ContractViolation):
        kl_diag_gaussians(G([0.0], [0.0]), G([0.0, 1.0], [0.0, 0.0]))


def test_kl_rejects_non_finite():
    with pytest.raises(ContractViolation):
        kl_diag_gaussians(G([float("nan")], [0.0]), G([0.0], [0.0]))


finite = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6).flatmap(lambda d: st.tuples(*[st.lists(finite, min_size=d, max_size=d)] * 4)))
def test_kl_nonnegative_and_additive(params):
    mq, lq, mp, lp = params
    q, p = G(mq, lq), G(mp, lp)
    kl = float(kl_diag_gaussians(q, p))
    assert kl >= -1e-12
    parts = sum(float(kl_diag_gaussians(G([a], [b]), G([c], [d]))) for a, b, c, d in zip(mq, lq, mp, lp))
    assert kl == pytest.approx(parts, rel=1e-12, abs=1e-12)
    if max(abs(a - b) for a, b in zip(mq + lq, mp + lp)) > 1e-3:
        assert kl > 0


def test_log_prob_at_mean_unit_variance():
    g = G([0.4, -2.0], [0.0, 0.0])
    assert float(gaussian_log_prob(g.mean, g)) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)


def test_log_prob_at_one_and_normalization():
    g = G([0.0], [0.0])
    direct = math.log(math.exp(-0.5) / math.sqrt(2 * math.pi))
    assert float(gaussian_log_prob(torch.tensor([1.0]), g)) == pytest.approx(direct, abs=1e-12)
    assert direct == pytest.approx(-1.4189, abs=1e-4)
    # density integrates to one on a fine grid
    g2 = G([0.7], [math.log(2.5)])
    grid = torch.linspace(-15, 15, 30001, dtype=torch.float64)[:, None]
    dens = torch.exp(gaussian_log_prob(grid, g2)).numpy()
    assert np.trapezoid(dens, grid[:, 0].numpy()) == pytest.approx(1.0, abs=1e-8)


def test_log_prob_empty_vector_rejected():
    with pytest.raises(ContractViolation):
        gaussian_log_prob(torch.zeros(0), G([0.0], [0.0]))
    with pytest.raises(ContractViolation):
        DiagGaussian(torch.zeros(0), torch.zeros(0))


def test_reparam_examples():
    g = G([1.0, -2.0], [0.0, 0.0])
    assert torch.equal(reparam_sample(g, torch.zeros(2, dtype=torch.float64)), g.mean)
    assert torch.equal(reparam_sample(g, torch.ones(2, dtype=torch.float64)), g.mean + 1)
    with pytest.raises(ContractViolation):
        reparam_sample(g, torch.zeros(3))


def test_reparam_logvar_gradient_finite_difference():
    h = 1e-6
    mean = torch.tensor([0.3, -0.1], dtype=torch.float64)
    noise = torch.ones(2, dtype=torch.float64)

    def f(lv):
        return reparam_sample(DiagGaussian(mean, lv), noise)

    lv = torch.zeros(2, dtype=torch.float64)
    for j in range(2):
        e = torch.zeros(2, dtype=torch.float64)
        e[j] = h
        fd = ((f(lv + e) - f(lv - e)) / (2 * h))[j].item()
        assert fd == pytest.approx(0.5, abs=1e-8)
    lv.requires_grad_(True)
    f(lv).sum().backward()
    assert torch.allclose(lv.grad, torch.full((2,), 0.5, dtype=torch.float64))


def test_reparam_distribution():
    g = G([0.5, -1.0, 2.0], [0.0, math.log(0.25), math.log(3.0)])
    gen = torch.Generator().manual_seed(7)
    n = 10**5
    x = reparam_sample(DiagGaussian(g.mean.expand(n, 3), g.logvar.expand(n, 3)),
                       torch.randn(n, 3, generator=gen, dtype=torch.float64))
    var = torch.exp(g.logvar)
    se_mean = torch.sqrt(var / n)
    se_var = var * math.sqrt(2.0 / (n - 1))
    assert ((x.mean(0) - g.mean).abs() < 3 * se_mean).all()
    assert ((x.var(0) - var).abs() < 3 * se_var).all()


def test_log_prior_mu2_values():
    assert float(log_prior_mu2(torch.zeros(32))) == pytest.approx(-16 * math.log(2 * math.pi), abs=1e-10)
    # -16 ln(2 pi) = -29.40603...
    assert float(log_prior_mu2(torch.zeros(32))) == pytest.approx(-29.40603, abs=1e-5)
    e1 = torch.zeros(32)
    e1[0] = 1
    assert float(log_prior_mu2(e1)) == pytest.approx(-29.90603, abs=1e-5)
    with pytest.raises(ContractViolation):
        log_prior_mu2(torch.tensor([float("inf")]))


def test_log_prior_consistency():
    gen = torch.Generator().manual_seed(3)
    std = DiagGaussian.standard(5)
    for _ in range(100):
        v = torch.randn(5, generator=gen, dtype=torch.float64) * 2
        assert float(log_prior_mu2(v)) == float(gaussian_log_prob(v, std))


def _fd_check(fn, args, h=1e-6):
    """Compare autograd with central differences for every input entry."""
    args = [a.clone().requires_grad_(True) for a in args]
    fn(*args).backward()
    for i, a in enumerate(args):
        flat = a.detach().clone().reshape(-1)
        for j in range(flat.numel()):
            plus, minus = flat.clone(), flat.clone()
            plus[j] += h
            minus[j] -= h
            ap = [x.detach() for x in args]
            am = [x.detach() for x in args]
            ap[i], am[i] = plus.reshape(a.shape), minus.reshape(a.shape)
            fd = (float(fn(*ap)) - float(fn(*am))) / (2 * h)
            an = a.grad.reshape(-1)[j].item()
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-8), (i, j, fd, an)


def test_all_operations_match_finite_differences():
    gen = torch.Generator().manual_seed(11)

    def r(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    _fd_check(lambda a, b, c, d: kl_diag_gaussians(DiagGaussian(a, b), DiagGaussian(c, d)), [r(4), r(4), r(4), r(4)])
    _fd_check(lambda x, m, lv: gaussian_log_prob(x, DiagGaussian(m, lv)), [r(4), r(4), r(4)])
    noise = r(4)
    _fd_check(lambda m, lv: (reparam_sample(DiagGaussian(m, lv), noise) ** 2).sum(), [r(4), r(4)])
    _fd_check(lambda v: log_prior_mu2(v), [r(4)])
