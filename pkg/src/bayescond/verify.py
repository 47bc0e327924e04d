"""Registered oracle checks, run by ``bayescond verify``.

Each check draws its own random instances from a seeded generator and
returns the largest error it saw next to the tolerance it must stay under.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import sqrtm

from . import operators as ops
from .estimator import analytic_gaussian_posterior_mean, dc_weight
from .operators import LiftedOperator, to_dense, whiten_combine
from .priors import (
    MixturePrior,
    bayesian_score,
    mixture_posterior,
    Observation,
    posterior_mean_joint,
    posterior_mean_whitened,
    unconditional_score,
    ve_posterior_mean_joint,
)

VARIANTS = ("identity", "inpaint_mask", "fourier_mask", "fourier_filter", "box_downsample", "dense")

# grid shapes per signal dimension, for the small randomized instances
_GRIDS = {1: [(1,)], 2: [(2,)], 3: [(3,)], 4: [(4,), (2, 2)]}
_BLOCKS = {(1,): [(1,)], (2,): [(2,)], (3,): [(3,)], (4,): [(2,), (4,)], (2, 2): [(1, 2), (2, 1), (2, 2)]}


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def random_operator(variant: str, rng: np.random.Generator, d: int = 4, dims=None):
    """Random operator of the given variant; ``dims`` overrides the grid choice."""
    if dims is None and variant in ("fourier_mask", "fourier_filter", "box_downsample"):
        dims = _pick(rng, _GRIDS[d]) if d in _GRIDS else (d,)
    if variant == "identity":
        return ops.Identity(d)
    if variant == "inpaint_mask":
        return ops.InpaintMask((rng.random(d) < 0.6).astype(float))
    if variant == "fourier_mask":
        return ops.FourierMask(ops.random_fourier_mask(dims, 0.5, rng), dims)
    if variant == "fourier_filter":
        h = rng.uniform(0.05, 1.5, dims)
        return ops.FourierFilter(0.5 * (h + ops._reflect(h)), dims)
    if variant == "box_downsample":
        blocks = _BLOCKS.get(tuple(dims)) or [tuple(2 if n % 2 == 0 else 1 for n in dims)]
        return ops.BoxDownsample(dims, _pick(rng, blocks))
    if variant == "dense":
        m = int(rng.integers(1, d + 2))
        return ops.Dense(rng.standard_normal((m, d)))
    raise ValueError(variant)


def random_prior(rng, d: int, kind: str = "discrete", n_max: int = 16) -> MixturePrior:
    n = int(rng.integers(1, n_max + 1))
    w = rng.dirichlet(np.ones(n))
    means = rng.uniform(-3, 3, (n, d))
    if kind == "discrete":
        return MixturePrior.discrete(means, w)
    G = rng.standard_normal((n, d, d)) * 0.5
    covs = G @ np.swapaxes(G, 1, 2) + 0.1 * np.eye(d)
    return MixturePrior.gaussian(means, covs, w)


@dataclass
class Instance:
    prior: MixturePrior
    op: ops.LinearOperator
    abar: float
    sigma0: float
    x_t: np.ndarray
    y: np.ndarray

    @property
    def kt(self):
        return np.sqrt(1.0 - self.abar) / self.sigma0

    def lifted(self) -> LiftedOperator:
        return LiftedOperator(self.op, self.abar, self.kt)


def random_instance(rng, variant=None, kind=None, d=None) -> Instance:
    """Prior, operator and a draw of ``(x_t, y)`` from the generative model."""
    d = int(rng.integers(1, 5)) if d is None else d
    variant = _pick(rng, VARIANTS) if variant is None else variant
    kind = _pick(rng, ("discrete", "gaussian")) if kind is None else kind
    prior = random_prior(rng, d, kind)
    op = random_operator(variant, rng, d)
    abar = float(rng.uniform(0.01, 0.99))
    sigma0 = float(rng.uniform(0.05, 2.0))
    x0, _ = prior.sample(1, rng)
    x0 = x0[0]
    x_t = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * rng.standard_normal(d)
    y = op.apply(x0) + sigma0 * rng.standard_normal(op.m)
    return Instance(prior, op, abar, sigma0, x_t, y)


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# ---------------------------------------------------------------------------
# Checks


def check_optimal_combination(rng, fault=None, n=50, kinds=("discrete", "gaussian"), d=None):
    combine = whiten_combine
    if fault == "kt_sign":
        combine = lambda L, x_t, y: whiten_combine(L, x_t, -np.asarray(y))  # noqa: E731
    worst = 0.0
    for i in range(n):
        inst = random_instance(rng, variant=VARIANTS[i % len(VARIANTS)], kind=kinds[i % len(kinds)], d=d)
        joint = posterior_mean_joint(inst.prior, inst.abar, inst.op, inst.x_t, inst.y, inst.sigma0)
        L = inst.lifted()
        whitened = posterior_mean_whitened(inst.prior, L, combine(L, inst.x_t, inst.y))
        worst = max(worst, float(np.max(np.abs(joint - whitened))))
    return worst


def check_tweedie(rng, fault=None, n=50):
    worst = 0.0
    for i in range(n):
        inst = random_instance(rng, variant=VARIANTS[i % len(VARIANTS)])
        ev = bayesian_score(inst.prior, inst.abar, inst.op, inst.x_t, inst.y, inst.sigma0)
        m = posterior_mean_joint(inst.prior, inst.abar, inst.op, inst.x_t, inst.y, inst.sigma0)
        ref = (np.sqrt(inst.abar) * m - inst.x_t) / (1 - inst.abar)
        worst = max(worst, float(np.max(np.abs(ev.score - ref))))
    return worst


def check_gmm_finite_difference(rng, fault=None, n=20, h=1e-5):
    worst = 0.0
    for i in range(n):
        inst = random_instance(rng, variant=VARIANTS[i % len(VARIANTS)], kind="gaussian")
        ev = bayesian_score(inst.prior, inst.abar, inst.op, inst.x_t, inst.y, inst.sigma0)
        eye = np.eye(inst.x_t.size)
        plus = bayesian_score(inst.prior, inst.abar, inst.op, inst.x_t + h * eye, inst.y, inst.sigma0).log_evidence
        minus = bayesian_score(inst.prior, inst.abar, inst.op, inst.x_t - h * eye, inst.y, inst.sigma0).log_evidence
        fd = (plus - minus) / (2 * h)
        worst = max(worst, float(np.linalg.norm(fd - ev.score)))
    return worst


def _operator_suite(rng):
    yield ops.Identity(64)
    yield ops.InpaintMask((rng.random(64) < 0.5).astype(float))
    yield ops.FourierMask(ops.random_fourier_mask((8, 8), 0.3, rng), (8, 8))
    yield ops.FourierFilter(ops.gaussian_blur_spectrum((8, 8), 1.5), (8, 8))
    yield ops.BoxDownsample((8, 8), (2, 2))
    yield ops.BoxDownsample((16,), (4,))
    yield ops.Dense(rng.standard_normal((20, 32)))


def check_adjoint(rng, fault=None):
    worst = 0.0
    for op in _operator_suite(rng):
        x = rng.standard_normal(op.d)
        y = rng.standard_normal(op.m)
        lhs, rhs = op.apply(x) @ y, x @ op.adjoint(y)
        worst = max(worst, abs(lhs - rhs) / (np.linalg.norm(op.apply(x)) * np.linalg.norm(y) + 1e-300))
    return worst


def check_lifted_dense(rng, fault=None):
    worst = 0.0
    for op in _operator_suite(rng):
        A = to_dense(op)
        L = LiftedOperator(op, float(rng.uniform(0.01, 0.99)), float(rng.uniform(0.1, 3)))
        M = L.abar * np.eye(op.d) + L.c * A.T @ A
        ref = np.real(sqrtm(M))
        worst = max(worst, _rel(L.to_dense(), ref))
        inv = L.apply_At_inv(np.eye(op.d)).T
        worst = max(worst, _rel(inv, np.linalg.inv(ref)))
    return worst


def check_gram(rng, fault=None):
    worst = 0.0
    for op in _operator_suite(rng):
        A = to_dense(op)
        L = LiftedOperator(op, float(rng.uniform(0.01, 0.99)), float(rng.uniform(0.1, 3)))
        At = L.to_dense()
        worst = max(worst, _rel(At.T @ At, L.abar * np.eye(op.d) + L.c * A.T @ A))
    return worst


def check_dc_dense(rng, fault=None):
    worst = 0.0
    for op in _operator_suite(rng):
        A = to_dense(op)
        L = LiftedOperator(op, float(rng.uniform(0.01, 0.99)), float(rng.uniform(0.1, 3)))
        lam = float(10 ** rng.uniform(-2, 2))
        x_d, xhat = rng.standard_normal((2, op.d))
        At = np.real(sqrtm(L.abar * np.eye(op.d) + L.c * A.T @ A))
        ref = np.linalg.solve(np.eye(op.d) + lam * At.T @ At, x_d + lam * At.T @ xhat)
        worst = max(worst, _rel(ops.dc_solve(L, x_d, xhat, lam), ref))
    return worst


def check_dc_cg(rng, fault=None):
    worst = 0.0
    for op in _operator_suite(rng):
        L = LiftedOperator(op, float(rng.uniform(0.01, 0.99)), float(rng.uniform(0.1, 3)))
        lam = float(10 ** rng.uniform(-2, 2))
        x_d, xhat = rng.standard_normal((2, op.d))
        worst = max(worst, _rel(ops.dc_solve(L, x_d, xhat, lam), ops.dc_solve(L, x_d, xhat, lam, method="cg")))
    return worst


def check_sr_woodbury(rng, fault=None):
    worst = 0.0
    for r in (2, 4, 9):
        op = ops.BoxDownsample((r,), (r,))
        L = LiftedOperator(op, float(rng.uniform(0.01, 0.99)), float(rng.uniform(0.1, 3)))
        prod = L.apply_At(L.apply_At_inv(np.eye(r)))
        worst = max(worst, float(np.max(np.abs(prod - np.eye(r)))))
    return worst


def check_whitening(rng, fault=None, n=100_000):
    worst = 0.0
    for op in (
        ops.Identity(8),
        ops.InpaintMask([1, 0, 1, 1, 0, 0, 1, 1]),
        ops.FourierMask(ops.random_fourier_mask((2, 4), 0.5, rng), (2, 4)),
        ops.FourierFilter(ops.gaussian_blur_spectrum((8,), 1.0), (8,)),
        ops.BoxDownsample((2, 4), (2, 2)),
        ops.Dense(rng.standard_normal((5, 8))),
    ):
        abar, sigma0 = float(rng.uniform(0.05, 0.95)), float(rng.uniform(0.1, 1.0))
        L = LiftedOperator(op, abar, np.sqrt(1 - abar) / sigma0)
        x0 = rng.standard_normal(8)
        x_t = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * rng.standard_normal((n, 8))
        y = op.apply(x0) + sigma0 * rng.standard_normal((n, op.m))
        r = whiten_combine(L, x_t, y) - L.apply_At(x0)
        cov = r.T @ r / n
        worst = max(worst, float(np.max(np.abs(cov - (1 - abar) * np.eye(8)))) / (1 - abar))
    return worst


def check_sigma0_limit(rng, fault=None, n=20):
    worst = 0.0
    for i in range(n):
        inst = random_instance(rng, variant=VARIANTS[i % len(VARIANTS)])
        a = bayesian_score(inst.prior, inst.abar, inst.op, inst.x_t, inst.y, 1e8).score
        b = unconditional_score(inst.prior, inst.abar, inst.x_t).score
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def check_ve_sufficient_combination(rng, fault=None, n=50):
    worst = 0.0
    for i in range(n):
        inst = random_instance(rng, variant=VARIANTS[i % len(VARIANTS)], kind="discrete")
        sigma = float(10 ** rng.uniform(-1, 1))
        x0 = inst.prior.sample(1, rng)[0][0]
        x_t = x0 + sigma * rng.standard_normal(x0.size)
        L = LiftedOperator(inst.op, 1.0, sigma / inst.sigma0, noise_var=sigma ** 2)
        joint = ve_posterior_mean_joint(inst.prior, sigma, inst.op, x_t, inst.y, inst.sigma0)
        whitened = posterior_mean_whitened(inst.prior, L, whiten_combine(L, x_t, inst.y))
        worst = max(worst, float(np.max(np.abs(joint - whitened))))
    return worst


def check_gaussian_closed_form(rng, fault=None, n=20):
    worst = 0.0
    for i in range(n):
        d = int(rng.integers(1, 5))
        prior = random_prior(rng, d, "gaussian", n_max=1)
        op = random_operator(VARIANTS[i % len(VARIANTS)], rng, d)
        L = LiftedOperator(op, float(rng.uniform(0.01, 0.99)), float(rng.uniform(0.1, 3)))
        xhat = rng.standard_normal(d) * 2
        a = analytic_gaussian_posterior_mean(prior.means[0], prior.covs[0], L, xhat)
        b = posterior_mean_whitened(prior, L, xhat)
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


def check_dc_energy(rng, fault=None, n=20_000):
    energies = []
    op = ops.BoxDownsample((2, 4), (1, 2))
    prior = MixturePrior.gaussian(np.zeros(8), np.eye(8)[None])
    for abar in (0.95, 0.7, 0.4, 0.1, 0.02):
        L = LiftedOperator(op, abar, np.sqrt(1 - abar) / 0.3)
        x0 = prior.sample(n, rng)[0]
        x_t = np.sqrt(abar) * x0 + np.sqrt(1 - abar) * rng.standard_normal(x0.shape)
        y = op.apply(x0) + 0.3 * rng.standard_normal((n, op.m))
        r = L.apply_At(x0) - whiten_combine(L, x_t, y)
        energies.append(dc_weight(0.01, L) * np.mean(np.sum(r * r, axis=1)))
    energies = np.asarray(energies)
    return float(np.max(np.abs(energies / (0.01 * 8) - 1.0)))


def check_shift_invariance(rng, fault=None, n=20):
    worst = 0.0
    for i in range(n):
        inst = random_instance(rng, kind="discrete")
        base = posterior_mean_joint(inst.prior, inst.abar, inst.op, inst.x_t, inst.y, inst.sigma0)
        # Shifting every log-likelihood by the same constant: a shared offset on the measurement noise
        # normalizer is equivalent to scaling all weights uniformly, which must not move the mean.
        obs = [
            Observation(None, np.sqrt(inst.abar), 1 - inst.abar, inst.x_t),
            Observation(inst.op, 1.0, inst.sigma0 ** 2, inst.y),
            Observation(ops.Dense(np.zeros((1, inst.x_t.size))), 1.0, 1.0, np.array([37.0])),
        ]
        shifted, _, _ = mixture_posterior(inst.prior, obs)
        worst = max(worst, float(np.max(np.abs(base - shifted))))
    return worst


def check_degenerate_d1(rng, fault=None):
    return check_optimal_combination(rng, fault=fault, n=20, d=1)


@dataclass(frozen=True)
class Check:
    name: str
    fn: Callable
    tolerance: float


REGISTRY = [
    Check("optimal_combination", check_optimal_combination, 1e-8),
    Check("optimal_combination_degenerate_d1", check_degenerate_d1, 1e-8),
    Check("tweedie_consistency", check_tweedie, 1e-12),
    Check("gmm_score_finite_difference", check_gmm_finite_difference, 1e-5),
    Check("bcsf_uninformative_limit", check_sigma0_limit, 1e-6),
    Check("adjoint_identity", check_adjoint, 1e-12),
    Check("lifted_operator_vs_dense", check_lifted_dense, 1e-8),
    Check("lifted_gram_identity", check_gram, 1e-10),
    Check("dc_closed_form_vs_dense", check_dc_dense, 1e-8),
    Check("dc_closed_form_vs_cg", check_dc_cg, 1e-8),
    Check("sr_woodbury_inverse", check_sr_woodbury, 1e-12),
    Check("whitening_covariance", check_whitening, 0.03),
    Check("ve_sufficient_combination", check_ve_sufficient_combination, 1e-8),
    Check("gaussian_closed_form_vs_mixture", check_gaussian_closed_form, 1e-10),
    Check("dc_constant_energy", check_dc_energy, 0.05),
    Check("log_weight_shift_invariance", check_shift_invariance, 1e-12),
]


def run_checks(seed: int = 0, fault: str | None = None, names=None, threads: int = 1) -> list[dict]:
    """Run registered checks; each gets an independent generator spawned from ``seed``."""
    selected = [c for c in REGISTRY if names is None or c.name in names]
    streams = np.random.SeedSequence(seed).spawn(len(REGISTRY))
    seeds = {c.name: s for c, s in zip(REGISTRY, streams)}

    def run(check):
        err = check.fn(np.random.default_rng(seeds[check.name]), fault=fault)
        return {
            "check": check.name,
            "status": "pass" if err < check.tolerance else "fail",
            "max_error": err,
            "tolerance": check.tolerance,
        }

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(run, selected))
    return [run(c) for c in selected]
