import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bayescond.operators import BoxDownsample, Dense, Identity, InpaintMask, LiftedOperator, whiten_combine
from bayescond.priors import (
    InputError,
    MixturePrior,
    bayesian_score,
    exact_posterior,
    mixture_posterior,
    Observation,
    post_conditioned_score,
    posterior_mean_joint,
    posterior_mean_whitened,
    tweedie_mean_from_score,
    unconditional_score,
    ve_posterior_mean,
)
from bayescond.schedule import ParameterError
from bayescond.experiments import fig1_problem


def brute_discrete_mean(atoms, weights, x_t, abar, A=None, y=None, sigma0=None):
    """Posterior mean by explicit per-atom summation with a manual max shift."""
    logs = []
    for mu, w in zip(atoms, weights):
        lw = math.log(w) - sum((x_t[j] - math.sqrt(abar) * mu[j]) ** 2 for j in range(len(mu))) / (2 * (1 - abar))
        if A is not None:
            Amu = A @ mu
            lw -= sum((y[j] - Amu[j]) ** 2 for j in range(len(y))) / (2 * sigma0 ** 2)
        logs.append(lw)
    top = max(logs)
    ws = [math.exp(v - top) for v in logs]
    z = sum(ws)
    return sum(w * np.asarray(mu) for w, mu in zip(ws, atoms)) / z


def brute_gaussian_mean(prior, x_t, abar, A, y, sigma0):
    """Gaussian-mixture posterior mean from explicit inverses of the joint covariance."""
    d = prior.d
    B = np.vstack([np.sqrt(abar) * np.eye(d), A])
    R = np.diag(np.r_[np.full(d, 1 - abar), np.full(A.shape[0], sigma0 ** 2)])
    z = np.r_[x_t, y]
    logs, means = [], []
    for w, mu, S in zip(prior.weights, prior.means, prior.covs):
        C = B @ S @ B.T + R
        Ci = np.linalg.inv(C)
        r = z - B @ mu
        logs.append(np.log(w) - 0.5 * r @ Ci @ r - 0.5 * np.linalg.slogdet(2 * np.pi * C)[1])
        means.append(mu + S @ B.T @ Ci @ r)
    logs = np.array(logs)
    p = np.exp(logs - logs.max())
    return (p / p.sum()) @ np.array(means)


def random_discrete(rng, d, n):
    return MixturePrior.discrete(rng.uniform(-3, 3, (n, d)), rng.dirichlet(np.ones(n)))


def test_single_atom_score():
    mu = np.array([1.0, -2.0])
    p = MixturePrior.discrete(mu[None])
    x = np.array([0.3, 0.4])
    ev = unconditional_score(p, 0.6, x)
    np.testing.assert_allclose(ev.score, (np.sqrt(0.6) * mu - x) / 0.4, atol=1e-15)


def test_symmetric_pair_at_origin():
    p = MixturePrior.discrete([[2.0, 1.0], [-2.0, -1.0]])
    ev = unconditional_score(p, 0.5, np.zeros(2))
    np.testing.assert_allclose(ev.posterior_mean, 0, atol=1e-15)
    np.testing.assert_allclose(ev.score, 0, atol=1e-15)


def test_fig1_unconditional_matches_brute_force(rng):
    prior, op, y, s0 = fig1_problem()
    for abar in (0.9, 0.1, 0.01):
        for x in rng.uniform(-8, 8, (10, 2)):
            ref = brute_discrete_mean(prior.means, prior.weights, x, abar)
            ev = unconditional_score(prior, abar, x)
            np.testing.assert_allclose(ev.posterior_mean, ref, atol=1e-12)
            np.testing.assert_allclose(ev.score, (np.sqrt(abar) * ref - x) / (1 - abar), atol=1e-12 / (1 - abar) * 10)


def test_bayesian_score_matches_brute_force(rng):
    for _ in range(30):
        d, n = rng.integers(1, 5), rng.integers(1, 17)
        prior = random_discrete(rng, d, n)
        A = rng.standard_normal((rng.integers(1, d + 2), d))
        x, y = rng.standard_normal(d), rng.standard_normal(A.shape[0])
        abar, s0 = rng.uniform(0.01, 0.99), rng.uniform(0.05, 2)
        ref = brute_discrete_mean(prior.means, prior.weights, x, abar, A, y, s0)
        ev = bayesian_score(prior, abar, Dense(A), x, y, s0)
        np.testing.assert_allclose(ev.posterior_mean, ref, atol=1e-12)
        np.testing.assert_array_equal(posterior_mean_joint(prior, abar, Dense(A), x, y, s0), ev.posterior_mean)


def test_gaussian_mixture_matches_brute_force(rng):
    for _ in range(20):
        d, n = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        G = rng.standard_normal((n, d, d))
        prior = MixturePrior.gaussian(rng.uniform(-2, 2, (n, d)), G @ G.transpose(0, 2, 1) + 0.2 * np.eye(d), rng.dirichlet(np.ones(n)))
        A = rng.standard_normal((int(rng.integers(1, d + 2)), d))
        x, y = rng.standard_normal(d), rng.standard_normal(A.shape[0])
        abar, s0 = rng.uniform(0.01, 0.99), rng.uniform(0.05, 2)
        ref = brute_gaussian_mean(prior, x, abar, A, y, s0)
        np.testing.assert_allclose(posterior_mean_joint(prior, abar, Dense(A), x, y, s0), ref, atol=1e-10)


def test_gaussian_single_component_closed_form(rng):
    mu = np.array([1.0, -1.0, 0.5])
    prior = MixturePrior.gaussian(mu, np.eye(3)[None])
    x, abar = rng.standard_normal(3), 0.4
    # N(mu, I) prior, x_t = sqrt(a) x0 + sqrt(1-a) n: E[x0|x_t] = mu + sqrt(a) (x_t - sqrt(a) mu)
    ref = mu + np.sqrt(abar) * (x - np.sqrt(abar) * mu)
    ev = unconditional_score(prior, abar, x)
    np.testing.assert_allclose(ev.posterior_mean, ref, atol=1e-12)
    np.testing.assert_allclose(tweedie_mean_from_score(ev.score, x, abar), ref, atol=1e-12)


def test_fig1_bayesian_mean_near_outlier_atom():
    prior, op, y, s0 = fig1_problem()
    x = np.sqrt(0.01) * np.array([-5.0, -5.0])
    m = bayesian_score(prior, 0.01, op, x, y, s0).posterior_mean
    np.testing.assert_allclose(m, [-5.0, -5.0], atol=1e-6)


def test_uninformative_measurement(rng):
    prior = random_discrete(rng, 3, 8)
    op = InpaintMask([1, 0, 1])
    x, y = rng.standard_normal(3), rng.standard_normal(3)
    a = bayesian_score(prior, 0.3, op, x, y, 1e8).score
    b = unconditional_score(prior, 0.3, x).score
    np.testing.assert_allclose(a, b, atol=1e-10)
    c = post_conditioned_score(prior, 0.3, op, x, y, 1e8).score
    np.testing.assert_allclose(c, b, atol=1e-10)


def test_post_conditioned_zero_correction(rng):
    prior = random_discrete(rng, 2, 5)
    op = Dense([[1.0, 0.0]])
    x = rng.standard_normal(2)
    y = op.apply(x)
    np.testing.assert_allclose(post_conditioned_score(prior, 0.5, op, x, y, 0.1).score,
                               unconditional_score(prior, 0.5, x).score, atol=0)


def test_post_conditioned_discrepancy_grows():
    prior, op, y, s0 = fig1_problem()
    g = np.linspace(-8, 8, 32)
    pts = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)

    def mean_gap(a):
        return np.linalg.norm(post_conditioned_score(prior, a, op, pts, y, s0).score
                              - bayesian_score(prior, a, op, pts, y, s0).score, axis=1).mean()

    assert mean_gap(0.01) > mean_gap(0.9)


def test_optimal_combination_identity_whitened(rng):
    for _ in range(50):
        d = int(rng.integers(1, 5))
        prior = random_discrete(rng, d, int(rng.integers(1, 17)))
        op = Identity(d)
        abar, s0 = rng.uniform(0.01, 0.99), rng.uniform(0.05, 2)
        x, y = rng.standard_normal(d), rng.standard_normal(d)
        L = LiftedOperator(op, abar, np.sqrt(1 - abar) / s0)
        np.testing.assert_allclose(posterior_mean_whitened(prior, L, whiten_combine(L, x, y)),
                                   posterior_mean_joint(prior, abar, op, x, y, s0), atol=1e-10)


def test_single_atom_whitened():
    prior = MixturePrior.discrete([[4.0, -1.0]])
    L = LiftedOperator(BoxDownsample((2,), (2,)), 0.3, 2.0)
    np.testing.assert_array_equal(posterior_mean_whitened(prior, L, np.array([100.0, -3.0])), [4.0, -1.0])


def test_exact_posterior_cases(rng):
    prior = random_discrete(rng, 2, 6)
    op = Dense([[1.0, 0.3]])
    np.testing.assert_allclose(exact_posterior(prior, op, [0.7], 1e9), prior.weights, atol=1e-12)
    y = op.apply(prior.means[3])
    assert exact_posterior(prior, op, y, 1e-6)[3] == pytest.approx(1.0, abs=1e-12)
    f_prior, f_op, f_y, f_s0 = fig1_problem()
    w = exact_posterior(f_prior, f_op, f_y, f_s0)
    assert w.sum() == pytest.approx(1.0)
    assert abs(f_prior.means[np.argmax(w), 0] + 4) < 1.5


def test_shift_invariance(rng):
    prior = random_discrete(rng, 3, 10)
    x = rng.standard_normal(3)
    base, ev, resp = mixture_posterior(prior, [Observation(None, 0.7, 0.5, x)])
    shifted = MixturePrior.discrete(prior.means, prior.weights)  # same weights, rebuilt
    obs = [Observation(None, 0.7, 0.5, x), Observation(Dense(np.zeros((1, 3))), 1.0, 1.0, [123.0])]
    m2, ev2, resp2 = mixture_posterior(shifted, obs)
    np.testing.assert_allclose(m2, base, atol=1e-12)
    np.testing.assert_allclose(resp2, resp, atol=1e-10)
    assert ev2 < ev


def test_underflow_regime_is_finite():
    prior, op, y, s0 = fig1_problem()
    x = np.array([[500.0, -500.0]])
    ev = bayesian_score(prior, 0.01, op, x, y, 1e-3)
    assert np.all(np.isfinite(ev.score))


def test_tweedie_consistency_property(rng):
    prior = random_discrete(rng, 2, 7)
    x = rng.standard_normal((20, 2))
    for abar in (0.05, 0.5, 0.95):
        ev = bayesian_score(prior, abar, Dense([[0.5, 1.0]]), x, [0.2], 0.3)
        np.testing.assert_allclose(ev.score * (1 - abar) + x, np.sqrt(abar) * ev.posterior_mean, atol=1e-12)
        np.testing.assert_allclose(tweedie_mean_from_score(ev.score, x, abar), ev.posterior_mean, atol=1e-12)
    np.testing.assert_allclose(tweedie_mean_from_score(np.zeros(2), x[0], 0.25), x[0] / 0.5)


@given(st.floats(0.02, 0.98), st.floats(0.05, 2.0), st.integers(0, 2 ** 31))
@settings(max_examples=30, deadline=None)
def test_gmm_score_finite_difference(abar, s0, seed):
    r = np.random.default_rng(seed)
    d = 2
    G = r.standard_normal((3, d, d))
    prior = MixturePrior.gaussian(r.uniform(-2, 2, (3, d)), G @ G.transpose(0, 2, 1) + 0.3 * np.eye(d))
    op = Dense(r.standard_normal((1, d)))
    x, y = r.standard_normal(d), r.standard_normal(1)
    h = 1e-5
    ev = bayesian_score(prior, abar, op, x, y, s0)
    fd = np.array([
        (bayesian_score(prior, abar, op, x + h * e, y, s0).log_evidence
         - bayesian_score(prior, abar, op, x - h * e, y, s0).log_evidence) / (2 * h)
        for e in np.eye(d)
    ])
    assert np.linalg.norm(fd - ev.score) <= 1e-5


def test_ve_posterior_mean_matches_brute_force(rng):
    prior = random_discrete(rng, 2, 5)
    x, sigma = rng.standard_normal(2), 0.8
    # VE with sigma equals VP with abar = 1/(1+sigma^2) after rescaling x by sqrt(abar)
    abar = 1 / (1 + sigma ** 2)
    ref = brute_discrete_mean(prior.means, prior.weights, np.sqrt(abar) * x, abar)
    np.testing.assert_allclose(ve_posterior_mean(prior, sigma, x), ref, atol=1e-12)


def test_validation_errors():
    with pytest.raises(ParameterError):
        MixturePrior.discrete([[0.0], [1.0]], [0.5, 0.6])
    with pytest.raises(np.linalg.LinAlgError):
        MixturePrior.gaussian([[0.0, 0.0]], [[[1.0, 0.0], [0.0, -1.0]]])
    p = MixturePrior.discrete([[0.0]])
    with pytest.raises(InputError):
        unconditional_score(p, 0.5, [np.nan])
    with pytest.raises(ParameterError):
        unconditional_score(p, 1.0, [0.0])
    with pytest.raises(ParameterError):
        bayesian_score(p, 0.5, Identity(1), [0.0], [0.0], 0.0)


def test_coincident_atoms_add():
    a = MixturePrior.discrete([[1.0], [1.0], [-1.0]], [0.25, 0.25, 0.5])
    b = MixturePrior.discrete([[1.0], [-1.0]], [0.5, 0.5])
    x = np.array([0.3])
    np.testing.assert_allclose(unconditional_score(a, 0.4, x).score, unconditional_score(b, 0.4, x).score, atol=1e-14)


def test_sampling_and_json(rng):
    G = rng.standard_normal((2, 2, 2))
    p = MixturePrior.gaussian([[0.0, 0.0], [5.0, 5.0]], G @ G.transpose(0, 2, 1) + np.eye(2), [0.3, 0.7])
    x, lab = p.sample(50_000, rng)
    assert abs(np.mean(lab == 1) - 0.7) < 0.01
    np.testing.assert_allclose(np.cov(x[lab == 1].T), p.covs[1], atol=0.1)
    q = MixturePrior.from_json(p.to_json())
    np.testing.assert_array_equal(q.covs, p.covs)
