"""Estimators of ``E[x0 | xhat]`` trained with the squared-error Bayesian loss.

Two desk-scale stand-ins for a learned network share the score-source
interface (``posterior_mean(xhat, L)``): a per-timestep affine map fitted by
least squares, and the unrolled denoise/data-consistency iteration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .formats import load_array, save_array
from .operators import LiftedOperator, LinearOperator, dc_solve, lift, whiten_combine
from .priors import InputError, MixturePrior
from .schedule import NoiseSchedule, ParameterError, forward_perturb

RIDGE = 1e-10


class FitError(RuntimeError):
    pass


def bayesian_loss(predict, xhat, x0) -> float:
    """Mean over the batch of ``|predict(xhat) - x0|^2``."""
    xhat = np.atleast_2d(np.asarray(xhat, dtype=np.float64))
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if xhat.shape[0] == 0:
        raise ParameterError("empty batch")
    if xhat.shape[0] != x0.shape[0]:
        raise ParameterError("xhat and x0 batch sizes differ")
    err = predict(xhat) - x0
    return float(np.mean(np.sum(err * err, axis=-1)))


def training_pairs(prior: MixturePrior, op: LinearOperator, s: NoiseSchedule, sigma0: float, t: int, n: int, rng):
    """Draw ``(xhat, x0, L)``: ``x0 ~ prior``, ``y = A x0 + sigma0 n0``, ``x_t`` by forward noising."""
    x0, _ = prior.sample(n, rng)
    y = op.apply(x0) + sigma0 * rng.standard_normal((n, op.m))
    x_t = forward_perturb(s, x0, t, rng)
    L = lift(op, s, sigma0, t)
    return whiten_combine(L, x_t, y), x0, L


def default_t_grid(s: NoiseSchedule, n: int = 16, lo: float = 0.01, hi: float = 0.99) -> np.ndarray:
    """Timesteps whose ``alpha_bar`` is nearest to ``n`` log-spaced targets in [lo, hi]."""
    targets = np.geomspace(lo, hi, n)
    return np.unique([s.timestep_for_alpha_bar(a) for a in targets])


@dataclass
class LinearEstimator:
    """Affine maps ``xhat -> W_t xhat + b_t`` on a grid of timesteps."""

    t_grid: np.ndarray
    W: np.ndarray
    b: np.ndarray
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t_grid = np.asarray(self.t_grid, dtype=np.int64)
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not np.all(np.isfinite(self.W)):
            raise FitError("non-finite weights")

    @property
    def d(self):
        return self.W.shape[-1]

    def index(self, t) -> int:
        hits = np.flatnonzero(self.t_grid == int(t))
        if hits.size == 0:
            raise KeyError(f"timestep {t} is not on the estimator grid")
        return int(hits[0])

    def __call__(self, xhat, t):
        i = self.index(t)
        return np.asarray(xhat) @ self.W[i].T + self.b[i]

    def posterior_mean(self, xhat, L: LiftedOperator):
        return self(xhat, L.t)

    def save(self, directory, prior_hash: str = "") -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_array(directory / "W.bcnd", self.W)
        save_array(directory / "b.bcnd", self.b)
        manifest = {
            "t_grid": self.t_grid.tolist(),
            "d": self.d,
            "prior_hash": prior_hash,
            "arrays": {"W": "W.bcnd", "b": "b.bcnd"},
        }
        path = directory / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, directory) -> "LinearEstimator":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        W = load_array(directory / manifest["arrays"]["W"])
        b = load_array(directory / manifest["arrays"]["b"])
        if W.shape[-1] != manifest["d"]:
            raise FitError("manifest dimension does not match stored weights")
        return cls(manifest["t_grid"], W, b)


def fit_affine(xhat, x0, ridge: float = RIDGE):
    """Least-squares ``(W, b)`` minimizing the empirical loss; returns ``(W, b, info)``."""
    n, d = xhat.shape
    if n < d + 1:
        raise FitError(f"need at least d + 1 = {d + 1} samples, got {n}")
    phi = np.hstack([xhat, np.ones((n, 1))])
    gram = phi.T @ phi / n
    scale = np.trace(gram) / (d + 1)
    gram[np.diag_indices_from(gram)] += ridge * max(scale, 1.0)
    try:
        fac = cho_factor(gram, lower=True)
    except LinAlgError as exc:
        raise FitError("normal equations are not positive definite") from exc
    piv = np.diag(fac[0]) ** 2
    if piv.min() <= 1e-14 * piv.max():
        raise FitError("normal equations are numerically rank deficient")
    coef = cho_solve(fac, phi.T @ x0 / n)
    W, b = coef[:d].T, coef[d]
    return W, b, {"condition": float(piv.max() / piv.min()), "n": int(n)}


def fit_linear(
    prior: MixturePrior,
    op: LinearOperator,
    s: NoiseSchedule,
    sigma0: float,
    t_grid=None,
    n_samples: int = 100_000,
    rng: np.random.Generator | None = None,
    threads: int = 1,
) -> LinearEstimator:
    """Fit one affine estimator per timestep on freshly drawn ``(xhat, x0)`` pairs.

    Each timestep gets its own child generator spawned from ``rng``, so the
    result does not depend on ``threads``.
    """
    rng = np.random.default_rng() if rng is None else rng
    t_grid = default_t_grid(s) if t_grid is None else np.asarray(t_grid)
    if n_samples < prior.d + 1:
        raise FitError(f"need at least d + 1 = {prior.d + 1} samples, got {n_samples}")
    children = rng.spawn(len(t_grid))

    def fit_one(i):
        xhat, x0, _ = training_pairs(prior, op, s, sigma0, int(t_grid[i]), n_samples, children[i])
        return fit_affine(xhat, x0)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            fits = list(pool.map(fit_one, range(len(t_grid))))
    else:
        fits = [fit_one(i) for i in range(len(t_grid))]
    report = {int(t): info for t, (_, _, info) in zip(t_grid, fits)}
    return LinearEstimator(t_grid, np.stack([f[0] for f in fits]), np.stack([f[1] for f in fits]), report)


def analytic_gaussian_affine(mu, Sigma, L: LiftedOperator):
    """``(W, b)`` of the exact affine posterior-mean map for a Gaussian prior."""
    mu = np.asarray(mu, dtype=np.float64)
    b = analytic_gaussian_posterior_mean(mu, Sigma, L, np.zeros(L.d))
    W = (analytic_gaussian_posterior_mean(mu, Sigma, L, np.eye(L.d)) - b).T
    return W, b


def analytic_gaussian_posterior_mean(mu, Sigma, L: LiftedOperator, xhat):
    """``mu + Sigma A_t^T (A_t Sigma A_t^T + noise_var I)^{-1} (xhat - A_t mu)``."""
    mu = np.asarray(mu, dtype=np.float64)
    Sigma = np.asarray(Sigma, dtype=np.float64)
    At = L.to_dense()
    S = At @ Sigma @ At.T + L.noise_var * np.eye(L.d)
    try:
        fac = cho_factor(S, lower=True)
    except LinAlgError as exc:
        raise InputError("observation covariance is not positive definite") from exc
    resid = np.asarray(xhat, dtype=np.float64) - At @ mu
    sol = cho_solve(fac, resid.reshape(-1, L.d).T).T
    return (mu + sol @ (At @ Sigma)).reshape(resid.shape)


@dataclass(frozen=True)
class GaussianOracle:
    """Score source for a single Gaussian prior via the closed form."""

    mu: np.ndarray
    Sigma: np.ndarray

    def posterior_mean(self, xhat, L):
        return analytic_gaussian_posterior_mean(self.mu, self.Sigma, L, xhat)


@dataclass(frozen=True)
class UnrolledConfig:
    denoiser: object
    n_it: int = 4
    lam: float = 0.01

    def __post_init__(self):
        if self.n_it < 1:
            raise ParameterError("n_it must be at least 1")
        if self.lam < 0:
            raise ParameterError("lam must be nonnegative")


def dc_weight(lam: float, L: LiftedOperator) -> float:
    """``lambda_t = lam / noise_var``, which keeps the DC energy constant over t."""
    return lam / L.noise_var


def unrolled_apply(cfg: UnrolledConfig, L: LiftedOperator, xhat) -> np.ndarray:
    """Alternate denoiser and data consistency ``cfg.n_it`` times, starting from ``xhat``."""
    xhat = np.asarray(xhat, dtype=np.float64)
    lam_t = dc_weight(cfg.lam, L)
    x = xhat
    for _ in range(cfg.n_it):
        x_d = cfg.denoiser.posterior_mean(x, L)
        x = dc_solve(L, x_d, xhat, lam_t)
    return x


@dataclass(frozen=True)
class Unrolled:
    """Score source wrapping :func:`unrolled_apply`."""

    cfg: UnrolledConfig

    def posterior_mean(self, xhat, L):
        return unrolled_apply(self.cfg, L, xhat)
