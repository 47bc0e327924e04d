"""Tractable priors with exact posterior means and score functions.

A prior is either a weighted set of atoms or a Gaussian mixture. Any number
of linear-Gaussian observations ``z = scale * B x0 + sqrt(var) n`` can be
fused with it exactly; every score below is a thin layer over that fusion.

Noise levels are passed as ``abar`` (VP) or ``sigma`` (VE) floats rather than
as schedule indices, so arbitrary noise levels can be probed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .operators import LinearOperator, to_dense
from .schedule import ParameterError

_LOG2PI = np.log(2.0 * np.pi)


class InputError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MixturePrior:
    kind: str
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray | None = None

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.asarray(self.means, dtype=np.float64)
        if mu.ndim == 1:
            mu = mu[:, None]
        if mu.shape[0] != w.size:
            raise ParameterError("one weight per component is required")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ParameterError("weights must be nonnegative and sum to 1")
        for a in (w, mu):
            a.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        if self.kind == "gaussian":
            covs = np.asarray(self.covs, dtype=np.float64).reshape(w.size, mu.shape[1], mu.shape[1])
            if not np.allclose(covs, np.swapaxes(covs, 1, 2)):
                raise ParameterError("covariances must be symmetric")
            for c in covs:
                np.linalg.cholesky(c)  # raises LinAlgError if not SPD
            covs.setflags(write=False)
            object.__setattr__(self, "covs", covs)
        elif self.kind != "discrete":
            raise ParameterError(f"unknown prior kind {self.kind!r}")

    @classmethod
    def discrete(cls, atoms, weights=None):
        atoms = np.asarray(atoms, dtype=np.float64)
        n = atoms.shape[0]
        if weights is None:
            weights = np.full(n, 1.0 / n)
        return cls("discrete", weights, atoms)

    @classmethod
    def gaussian(cls, means, covs, weights=None):
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        n = means.shape[0]
        if weights is None:
            weights = np.full(n, 1.0 / n)
        return cls("gaussian", weights, means, covs)

    @property
    def N(self) -> int:
        return self.weights.size

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, rng: np.random.Generator):
        """Draw ``n`` samples; returns ``(x0, component_labels)``."""
        labels = rng.choice(self.N, size=n, p=self.weights)
        x0 = self.means[labels].copy()
        if self.kind == "gaussian":
            chol = np.linalg.cholesky(self.covs)
            z = rng.standard_normal((n, self.d))
            x0 += np.einsum("nij,nj->ni", chol[labels], z)
        return x0, labels

    def to_json(self) -> dict:
        out = {"kind": self.kind, "weights": self.weights.tolist()}
        if self.kind == "discrete":
            out["atoms"] = self.means.tolist()
        else:
            out["means"] = self.means.tolist()
            out["covs"] = self.covs.tolist()
        return out

    @classmethod
    def from_json(cls, obj) -> "MixturePrior":
        if isinstance(obj, str):
            obj = json.loads(obj)
        if obj["kind"] == "discrete":
            return cls.discrete(obj["atoms"], obj.get("weights"))
        if obj["kind"] == "gaussian":
            return cls.gaussian(obj["means"], obj["covs"], obj.get("weights"))
        raise ParameterError(f"unknown prior kind {obj['kind']!r}")


@dataclass
class ScoreEval:
    """Score, the posterior mean it was formed from, and the log normalizer."""

    score: np.ndarray
    posterior_mean: np.ndarray
    log_evidence: np.ndarray


@dataclass(frozen=True)
class Observation:
    """``value = scale * op(x0) + sqrt(noise_var) * n``; ``op=None`` means identity."""

    op: object
    scale: float
    noise_var: float
    value: np.ndarray


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InputError("non-finite input")


def mixture_posterior(prior: MixturePrior, observations: Sequence[Observation]):
    """Exact posterior of ``x0`` under ``prior`` given Gaussian observations.

    Returns ``(mean, log_evidence, log_resp)``; ``log_resp`` holds the
    normalized log posterior component weights on the last axis.
    """
    obs = [Observation(o.op, o.scale, o.noise_var, np.asarray(o.value, dtype=np.float64)) for o in observations]
    _check_finite(*[o.value for o in obs])
    with np.errstate(divide="ignore"):
        log_w = np.log(prior.weights)
    if prior.kind == "discrete":
        log_joint = log_w
        for o in obs:
            pred = o.scale * (prior.means if o.op is None else o.op.apply(prior.means))
            diff = o.value[..., None, :] - pred
            m = pred.shape[-1]
            ll = -0.5 * np.einsum("...ij,...ij->...i", diff, diff) / o.noise_var - 0.5 * m * (_LOG2PI + np.log(o.noise_var))
            log_joint = log_joint + ll
        log_ev = logsumexp(log_joint, axis=-1)
        log_resp = log_joint - log_ev[..., None]
        mean = np.exp(log_resp) @ prior.means
        return mean, log_ev, log_resp
    return _gaussian_mixture_posterior(prior, obs, log_w)


def _gaussian_mixture_posterior(prior, obs, log_w):
    d = prior.d
    B = np.vstack([o.scale * (np.eye(d) if o.op is None else to_dense(o.op)) for o in obs])
    R = np.concatenate([np.full(d if o.op is None else o.op.m, o.noise_var) for o in obs])
    lead = np.broadcast_shapes(*[o.value.shape[:-1] for o in obs])
    z = np.concatenate([np.broadcast_to(o.value, lead + o.value.shape[-1:]) for o in obs], axis=-1)
    zf = z.reshape(-1, z.shape[-1])
    M = B.shape[0]
    log_joint = np.empty((zf.shape[0], prior.N))
    comp_means = np.empty((zf.shape[0], prior.N, d))
    for i in range(prior.N):
        mu, Sig = prior.means[i], prior.covs[i]
        S = B @ Sig @ B.T + np.diag(R)
        fac = cho_factor(S, lower=True)
        resid = zf - B @ mu
        sol = cho_solve(fac, resid.T).T
        logdet = 2.0 * np.log(np.diag(fac[0])).sum()
        log_joint[:, i] = log_w[i] - 0.5 * np.einsum("ij,ij->i", resid, sol) - 0.5 * (logdet + M * _LOG2PI)
        comp_means[:, i] = mu + sol @ (B @ Sig)
    log_ev = logsumexp(log_joint, axis=-1)
    log_resp = log_joint - log_ev[:, None]
    mean = np.einsum("ni,nid->nd", np.exp(log_resp), comp_means)
    return mean.reshape(lead + (d,)), log_ev.reshape(lead), log_resp.reshape(lead + (prior.N,))


# ---------------------------------------------------------------------------
# VP scores


def _vp_obs(abar, x_t):
    return Observation(None, np.sqrt(abar), 1.0 - abar, x_t)


def _tweedie(mean, x_t, abar):
    return (np.sqrt(abar) * mean - x_t) / (1.0 - abar)


def _check_abar(abar):
    if not 0 < abar < 1:
        raise ParameterError(f"abar must lie in (0, 1) for score evaluation, got {abar}")


def unconditional_score(prior: MixturePrior, abar: float, x_t) -> ScoreEval:
    """Exact ``grad log q(x_t)`` via Tweedie's formula."""
    _check_abar(abar)
    x_t = np.asarray(x_t, dtype=np.float64)
    mean, log_ev, _ = mixture_posterior(prior, [_vp_obs(abar, x_t)])
    return ScoreEval(_tweedie(mean, x_t, abar), mean, log_ev)


def posterior_mean_joint(prior: MixturePrior, abar: float, op: LinearOperator, x_t, y, sigma0: float):
    """``E[x0 | x_t, y]`` with both likelihood factors."""
    _check_abar(abar)
    mean, _, _ = mixture_posterior(prior, [_vp_obs(abar, x_t), Observation(op, 1.0, sigma0 ** 2, y)])
    return mean


def bayesian_score(prior: MixturePrior, abar: float, op: LinearOperator, x_t, y, sigma0: float) -> ScoreEval:
    """Exact conditional score ``grad_{x_t} log q(x_t | y)``."""
    _check_abar(abar)
    if not sigma0 > 0:
        raise ParameterError("sigma0 must be positive")
    x_t = np.asarray(x_t, dtype=np.float64)
    mean, log_ev, _ = mixture_posterior(prior, [_vp_obs(abar, x_t), Observation(op, 1.0, sigma0 ** 2, y)])
    return ScoreEval(_tweedie(mean, x_t, abar), mean, log_ev)


def post_conditioned_score(prior: MixturePrior, abar: float, op: LinearOperator, x_t, y, sigma0: float) -> ScoreEval:
    """Unconditional score plus the affine correction ``-A^T (A x_t - y) / sigma0^2``."""
    if not sigma0 > 0:
        raise ParameterError("sigma0 must be positive")
    base = unconditional_score(prior, abar, x_t)
    x_t = np.asarray(x_t, dtype=np.float64)
    score = base.score - op.adjoint(op.apply(x_t) - np.asarray(y, dtype=np.float64)) / sigma0 ** 2
    return ScoreEval(score, tweedie_mean_from_score(score, x_t, abar), base.log_evidence)


def posterior_mean_whitened(prior: MixturePrior, L, xhat):
    """``E[x0 | xhat]`` under ``xhat = A_t x0 + sqrt(noise_var) n``."""
    mean, _, _ = mixture_posterior(prior, [Observation(L, 1.0, L.noise_var, xhat)])
    return mean


def exact_posterior(prior: MixturePrior, op: LinearOperator, y, sigma0: float) -> np.ndarray:
    """Posterior component weights ``q(i | y)`` for a discrete prior."""
    if prior.kind != "discrete":
        raise ParameterError("exact_posterior requires a discrete prior")
    _, _, log_resp = mixture_posterior(prior, [Observation(op, 1.0, sigma0 ** 2, y)])
    return np.exp(log_resp)


def tweedie_mean_from_score(score, x_t, abar: float):
    """Invert Tweedie: ``(x_t + (1 - abar) score) / sqrt(abar)``."""
    return (np.asarray(x_t) + (1.0 - abar) * np.asarray(score)) / np.sqrt(abar)


# ---------------------------------------------------------------------------
# VE counterparts


def ve_posterior_mean(prior: MixturePrior, sigma: float, x_t):
    """``E[x0 | x_t]`` for ``x_t = x0 + sigma n``."""
    mean, _, _ = mixture_posterior(prior, [Observation(None, 1.0, sigma ** 2, x_t)])
    return mean


def ve_posterior_mean_joint(prior: MixturePrior, sigma: float, op: LinearOperator, x_t, y, sigma0: float):
    mean, _, _ = mixture_posterior(
        prior, [Observation(None, 1.0, sigma ** 2, x_t), Observation(op, 1.0, sigma0 ** 2, y)]
    )
    return mean
