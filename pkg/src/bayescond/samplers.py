"""Reverse-diffusion samplers driven by exact or learned posterior means.

A score source is anything with a ``posterior_mean(xhat, L)`` method that
returns ``E[x0 | xhat]`` for the whitened observation carried by the lifted
operator ``L``. The unconditional case is the same call with ``kt = 0``, where
``xhat`` reduces to ``x_t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .operators import Identity, LiftedOperator, LinearOperator, lift, whiten_combine
from .priors import InputError, MixturePrior, posterior_mean_whitened
from .schedule import NoiseSchedule, ParameterError

MODES = ("unconditional", "post_conditioned", "bayesian")


class SamplerError(RuntimeError):
    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class ScoreSource(Protocol):
    def posterior_mean(self, xhat: np.ndarray, L: LiftedOperator) -> np.ndarray: ...


@dataclass(frozen=True)
class ExactPrior:
    """Score source backed by the exact posterior of a tractable prior."""

    prior: MixturePrior

    def posterior_mean(self, xhat, L):
        return posterior_mean_whitened(self.prior, L, xhat)


@dataclass(frozen=True)
class Langevin:
    n_steps: int = 1
    snr: float = 0.16


@dataclass
class SamplerConfig:
    schedule: NoiseSchedule
    source: ScoreSource
    mode: str = "bayesian"
    sigma0: float | None = None
    seed: int = 0
    n_chains: int = 1
    final_step_noise: bool = False
    corrector: Langevin | None = None
    snapshots: tuple = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "unconditional" and not (self.sigma0 and self.sigma0 > 0):
            raise ParameterError(f"mode {self.mode!r} needs a positive sigma0")
        if self.corrector is not None and self.schedule.kind != "VE":
            raise ParameterError("the Langevin corrector is only available for VE sampling")


@dataclass
class Trajectory:
    x0_estimate: np.ndarray
    states: dict = field(default_factory=dict)

    @property
    def snapshot_times(self):
        return sorted(self.states, reverse=True)


def ancestral_step(x_t, score, t: int, s: NoiseSchedule, rng: np.random.Generator, final_step_noise: bool = False):
    """One VP reverse step ``(x_t + (1 - a) score) / sqrt(a) + sqrt(1 - a) n``."""
    if t < 1:
        raise IndexError("ancestral_step needs t >= 1")
    a = s.alpha(t)
    x = (x_t + (1.0 - a) * score) / np.sqrt(a)
    if t > 1 or final_step_noise:
        x = x + np.sqrt(1.0 - a) * rng.standard_normal(np.shape(x_t))
    return x


def _null_lift(d, abar, t, noise_var):
    return LiftedOperator(Identity(d), abar, 0.0, t=t, noise_var=noise_var)


def unconditional_score_from(est: ScoreSource, x_t, abar: float, noise_var: float, t=None):
    """Tweedie score ``(sqrt(abar) E[x0 | x_t] - x_t) / noise_var``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    L = _null_lift(x_t.shape[-1], abar, t, noise_var)
    return (np.sqrt(abar) * est.posterior_mean(x_t, L) - x_t) / noise_var


def bayesian_conditional_score(est: ScoreSource, L: LiftedOperator, x_t, y):
    """Conditional score from the whitened combination of ``x_t`` and ``y``.

    ``(sqrt(abar) est(A_t^{-1}(sqrt(abar) x_t + kt^2 A^T y)) - x_t) / noise_var``;
    with a VE lift (``abar = 1``, ``noise_var = sigma_t^2``) this is the VE form.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    xhat = whiten_combine(L, x_t, y)
    return (np.sqrt(L.abar) * est.posterior_mean(xhat, L) - x_t) / L.noise_var


def post_conditioned_correction(op: LinearOperator, x_t, y, sigma0: float):
    return -op.adjoint(op.apply(x_t) - np.asarray(y, dtype=np.float64)) / sigma0 ** 2


def ve_conditional_score(est: ScoreSource, op: LinearOperator, x_t, y, sigma0: float, s: NoiseSchedule, t: int):
    """VE conditional score ``(E[x0 | xhat] - x_t) / sigma_t^2``."""
    if s.kind != "VE":
        raise ParameterError("ve_conditional_score needs a VE schedule")
    return bayesian_conditional_score(est, lift(op, s, sigma0, t), x_t, y)


def ve_identity_rescale(L: LiftedOperator, xhat):
    """Map a denoising-case whitened input to a plain VE input.

    For ``A = I`` the whitened observation is ``sqrt(1 + v^2) x0 + sigma n``;
    dividing by ``sqrt(1 + v^2)`` gives ``x0 + sigma' n`` with
    ``sigma' = sigma / sqrt(1 + v^2)``, which an unconditional VE denoiser
    accepts directly. Returns ``(rescaled_input, sigma')``.
    """
    if not isinstance(L.base, Identity):
        raise ParameterError("rescaling applies to the identity operator only")
    g = np.sqrt(1.0 + L.c)
    return np.asarray(xhat) / g, np.sqrt(L.noise_var) / g


@dataclass(frozen=True)
class RescaledDenoiser:
    """Adapts an unconditional VE denoiser ``f(x, sigma) -> E[x0 | x]`` to the identity lift."""

    denoise: object

    def posterior_mean(self, xhat, L):
        x, sig = ve_identity_rescale(L, xhat)
        return self.denoise(x, sig)


def _score_at(cfg: SamplerConfig, op, y, x, t):
    _check(x, t)
    try:
        return _raw_score(cfg, op, y, x, t)
    except InputError as exc:
        raise SamplerError(f"score evaluation failed at timestep {t}: {exc}", t=t) from exc


def _raw_score(cfg: SamplerConfig, op, y, x, t):
    s = cfg.schedule
    if s.kind == "VP":
        abar, nv = s.alpha_bar(t), 1.0 - s.alpha_bar(t)
    else:
        abar, nv = 1.0, s.sigma(t) ** 2
    if cfg.mode == "bayesian":
        return bayesian_conditional_score(cfg.source, lift(op, s, cfg.sigma0, t), x, y)
    score = unconditional_score_from(cfg.source, x, abar, nv, t)
    if cfg.mode == "post_conditioned":
        score = score + post_conditioned_correction(op, x, y, cfg.sigma0)
    return score


def _check(x, t):
    with np.errstate(over="ignore"):
        finite = np.all(np.isfinite(x)) and np.all(np.isfinite(np.sum(x * x, axis=-1)))
    if not finite:
        raise SamplerError(f"non-finite state at timestep {t}", t=t)


def _prepare(cfg, op, y, d):
    if cfg.mode != "unconditional":
        if op is None or y is None:
            raise ParameterError(f"mode {cfg.mode!r} needs an operator and a measurement")
        y = np.asarray(y, dtype=np.float64)
    if op is not None:
        d = op.d
    if d is None:
        raise ParameterError("signal dimension unknown; pass an operator or d")
    return y, d


def sample(cfg: SamplerConfig, op: LinearOperator | None = None, y=None, d: int | None = None) -> Trajectory:
    """Run ``cfg.n_chains`` VP ancestral chains from ``x_T ~ N(0, I)``.

    Returns states of shape ``(n_chains, d)``.
    """
    s = cfg.schedule
    if s.kind != "VP":
        return ve_sample(cfg, op, y, d)
    y, d = _prepare(cfg, op, y, d)
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal((cfg.n_chains, d))
    keep = set(int(t) for t in cfg.snapshots)
    traj = Trajectory(x0_estimate=x)
    for t in range(s.T, 0, -1):
        if t in keep:
            traj.states[t] = x.copy()
        score = _score_at(cfg, op, y, x, t)
        x = ancestral_step(x, score, t, s, rng, cfg.final_step_noise)
        _check(x, t)
    if 0 in keep:
        traj.states[0] = x.copy()
    traj.x0_estimate = x
    return traj


def ve_sample(cfg: SamplerConfig, op: LinearOperator | None = None, y=None, d: int | None = None) -> Trajectory:
    """VE reverse-diffusion predictor with an optional Langevin corrector."""
    s = cfg.schedule
    if s.kind != "VE":
        raise ParameterError("ve_sample needs a VE schedule")
    y, d = _prepare(cfg, op, y, d)
    rng = np.random.default_rng(cfg.seed)
    x = s.sigma(s.T) * rng.standard_normal((cfg.n_chains, d))
    keep = set(int(t) for t in cfg.snapshots)
    traj = Trajectory(x0_estimate=x)
    for t in range(s.T, 0, -1):
        if t in keep:
            traj.states[t] = x.copy()
        if cfg.corrector is not None:
            x = _langevin(cfg, op, y, x, t, rng)
        var_step = s.sigma(t) ** 2 - s.sigma(t - 1) ** 2
        x = x + var_step * _score_at(cfg, op, y, x, t)
        if t > 1 or cfg.final_step_noise:
            x = x + np.sqrt(var_step) * rng.standard_normal(x.shape)
        _check(x, t)
    if 0 in keep:
        traj.states[0] = x.copy()
    traj.x0_estimate = x
    return traj


def _langevin(cfg, op, y, x, t, rng):
    for _ in range(cfg.corrector.n_steps):
        g = _score_at(cfg, op, y, x, t)
        z = rng.standard_normal(x.shape)
        # batch-averaged norms; per-chain norms blow up where the score vanishes
        gn = np.linalg.norm(g, axis=-1).mean()
        zn = np.linalg.norm(z, axis=-1).mean()
        eps = 2.0 * (cfg.corrector.snr * zn / max(gn, 1e-300)) ** 2
        x = x + eps * g + np.sqrt(2.0 * eps) * z
    return x


# ---------------------------------------------------------------------------
# Run statistics


def nearest_atom(x, atoms) -> np.ndarray:
    """Index of the closest atom per row; ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    d2 = ((x[..., None, :] - np.asarray(atoms)) ** 2).sum(-1)
    return np.argmin(d2, axis=-1)


def atom_histogram(x, atoms) -> np.ndarray:
    idx = nearest_atom(x, atoms)
    return np.bincount(idx, minlength=len(atoms)) / idx.size


def tv_distance(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())
