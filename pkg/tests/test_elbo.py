import math

import numpy as np
import pytest
import torch
from scipy.stats import norm

from conftest import tiny_model
from gpssm.data import kink_generate
from gpssm.elbo import EmissionModel, elbo_estimate, emission_term, prior_x0_term, transition_term
from gpssm.kernels import RBF
from gpssm.sparse_gp import SparseGP
from gpssm.state_posterior import GaussMarkov, sample_trajectory


def test_emission_without_covariance_is_gaussian_loglik(rng):
    em = EmissionModel(2, 2, sigma_g2=0.3)
    m = torch.from_numpy(rng.normal(size=(4, 2)))
    Y = torch.from_numpy(rng.normal(size=(4, 2)))
    got = float(emission_term(em, m, torch.zeros(4, 2, 2), Y))
    expect = norm.logpdf(Y.numpy(), m.numpy(), math.sqrt(0.3)).sum()
    assert got == pytest.approx(expect, abs=1e-10)


def test_emission_exact_fit_leaves_normaliser_and_trace(rng):
    W = rng.normal(size=(3, 2))
    em = EmissionModel(3, 2, sigma_g2=0.2, W=W, b=[0.1, 0.2, 0.3])
    m = torch.from_numpy(rng.normal(size=(2, 2)))
    B = torch.from_numpy(rng.normal(size=(2, 2, 2)))
    S = B @ B.transpose(-1, -2)
    Y = em.mean(m).detach()
    got = float(emission_term(em, m, S, Y))
    trace = sum(float(torch.trace(torch.from_numpy(W.T @ W) @ S[t])) for t in range(2))
    expect = -0.5 * 2 * 3 * math.log(2 * math.pi * 0.2) - 0.5 * trace / 0.2
    assert got == pytest.approx(expect, abs=1e-10)


def test_emission_matches_monte_carlo(rng):
    em = EmissionModel(1, 1, sigma_g2=0.4, W=[[1.3]], b=[-0.2])
    m = rng.normal(size=(2, 1))
    s = np.abs(rng.normal(size=2)) + 0.3
    Y = rng.normal(size=(2, 1))
    got = float(emission_term(em, torch.from_numpy(m), torch.from_numpy(s[:, None, None] ** 2), torch.from_numpy(Y)))
    n = 10**6
    x = m[:, 0] + s * rng.standard_normal((n, 2))
    vals = norm.logpdf(Y[:, 0], 1.3 * x - 0.2, math.sqrt(0.4)).sum(1)
    assert abs(got - vals.mean()) < 3 * vals.std() / math.sqrt(n)


def _pinned_gp(D=2, sigma_f2=0.05):
    gp = SparseGP(RBF(D), np.zeros((2, D)), D, sigma_f2=sigma_f2)
    gp.pinned = True
    return gp


def test_transition_on_mean_path(rng):
    T, D = 4, 2
    gp = _pinned_gp(D)
    xhat = torch.from_numpy(np.repeat(rng.normal(size=(1, D)), T + 1, 0))
    got = float(transition_term(gp, xhat))
    assert got == pytest.approx(-0.5 * T * D * math.log(2 * math.pi * 0.05), abs=1e-12)


def test_transition_large_noise_limit(rng):
    T, D = 3, 2
    xhat = torch.from_numpy(rng.normal(size=(T + 1, D)))
    for s2 in (1e4, 1e6):
        gp = SparseGP(RBF(D), rng.normal(size=(3, D)), D, sigma_f2=s2)
        got = float(transition_term(gp, xhat))
        lead = -0.5 * T * D * math.log(2 * math.pi * s2)
        assert abs(got - lead) < 50.0 / s2


def test_transition_single_sample_consistency(rng):
    T, D, M = 3, 1, 2
    gp = SparseGP(RBF(1, lengthscale=0.7), rng.normal(size=(M, 1)), 1, sigma_f2=0.2)
    gp.set_q_u(rng.normal(size=(1, M)), 0.3 * np.eye(M)[None])
    q = GaussMarkov(
        torch.tensor([0.3]), torch.tensor([[0.8]]), torch.from_numpy(rng.normal(size=(T, 1, 1))), 0.4 * torch.ones(T, 1, 1)
    )

    def draws(n):
        with torch.no_grad():
            xs = sample_trajectory(q, torch.from_numpy(rng.standard_normal((n, T + 1, D))))
            return transition_term(gp, xs).numpy()

    single = draws(10**5)
    ref = draws(10**6)
    se = math.sqrt(single.var() / len(single) + ref.var() / len(ref))
    assert abs(single.mean() - ref.mean()) < 3 * se


def test_prior_x0_values(rng):
    assert float(prior_x0_term(torch.zeros(1), torch.eye(1))) == pytest.approx(-1.41894, abs=1e-5)
    assert float(prior_x0_term(torch.zeros(3), torch.zeros(3, 3))) == pytest.approx(-1.5 * math.log(2 * math.pi))
    m0 = rng.normal(size=2)
    L0 = np.tril(rng.normal(size=(2, 2)))
    n = 10**6
    x = m0 + rng.standard_normal((n, 2)) @ L0.T
    vals = norm.logpdf(x).sum(1)
    got = float(prior_x0_term(torch.from_numpy(m0), torch.from_numpy(L0)))
    assert abs(got - vals.mean()) < 3 * vals.std() / math.sqrt(n)


@pytest.fixture
def kink_small():
    return kink_generate(6, 5, seed=3)


def test_full_batch_scale_is_one(kink_small):
    model = tiny_model(kink_small)
    eps = [torch.zeros(1, 6, 6, 1)]
    a = elbo_estimate(model, kink_small.episodes, eps=eps)
    b = elbo_estimate(model, kink_small.episodes, total_episodes=6, eps=eps)
    assert float(a.total) == float(b.total)


def test_minibatch_scaling_and_kl_once(kink_small):
    model = tiny_model(kink_small)
    batch = kink_small.episodes[:2]
    eps = [torch.from_numpy(np.random.default_rng(0).standard_normal((1, 2, 6, 1)))]
    one = elbo_estimate(model, batch, total_episodes=2, eps=eps)
    big = elbo_estimate(model, batch, total_episodes=20, eps=eps)
    for key in ("emission", "transition", "entropy", "prior_x0"):
        assert float(getattr(big, key)) == pytest.approx(10 * float(getattr(one, key)), rel=1e-12)
    assert float(big.kl_u) == float(one.kl_u)
    parts = big.emission + big.transition + big.entropy - big.kl_u + big.prior_x0
    assert float(big.total) == pytest.approx(float(parts), rel=1e-14)


def test_same_seed_same_estimate(kink_small):
    model = tiny_model(kink_small)
    a = elbo_estimate(model, kink_small.episodes, rng=np.random.default_rng(7))
    b = elbo_estimate(model, kink_small.episodes, rng=np.random.default_rng(7))
    assert float(a.total) == float(b.total)


def test_closed_form_parts_have_no_sampling_noise(kink_small):
    model = tiny_model(kink_small)
    runs = [elbo_estimate(model, kink_small.episodes, rng=np.random.default_rng(s)).as_dict() for s in range(4)]
    for key in ("emission", "entropy", "kl_u", "prior_x0"):
        assert len({r[key] for r in runs}) == 1
    assert len({r["transition"] for r in runs}) > 1


def test_mixed_lengths_grouped():
    a = kink_generate(3, 4, seed=1)
    b = kink_generate(2, 6, seed=2)
    batch = a.episodes + b.episodes
    model = tiny_model(a)
    out = elbo_estimate(model, batch, rng=np.random.default_rng(0))
    assert math.isfinite(float(out.total))
    sep = elbo_estimate(model, a.episodes, eps=[torch.zeros(1, 3, 5, 1)])
    both = elbo_estimate(model, batch, eps=[torch.zeros(1, 3, 5, 1), torch.zeros(1, 2, 7, 1)])
    alone_b = elbo_estimate(model, b.episodes, eps=[torch.zeros(1, 2, 7, 1)])
    assert float(both.emission) == pytest.approx(float(sep.emission) + float(alone_b.emission))


def test_single_sample_estimator_is_unbiased(kink_small):
    model = tiny_model(kink_small)
    rng = np.random.default_rng(11)
    with torch.no_grad():
        singles = np.array([float(elbo_estimate(model, kink_small.episodes, rng=rng).total) for _ in range(2000)])
        ref_draws = np.array(
            [float(elbo_estimate(model, kink_small.episodes, num_samples=10**4, rng=rng).total) for _ in range(10)]
        )
    ref = ref_draws.mean()
    se = singles.std() / math.sqrt(len(singles))
    assert abs(singles.mean() - ref) < 3 * se + ref_draws.std() / math.sqrt(10) * 3


def test_rejects_bad_arguments(kink_small):
    model = tiny_model(kink_small)
    with pytest.raises(ValueError):
        elbo_estimate(model, [], rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        elbo_estimate(model, kink_small.episodes)
    with pytest.raises(ValueError):
        elbo_estimate(model, kink_small.episodes, num_samples=0, rng=np.random.default_rng(0))
