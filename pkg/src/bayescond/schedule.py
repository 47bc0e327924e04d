"""VP and VE diffusion schedules and the forward perturbation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class ParameterError(ValueError):
    """Invalid numeric parameter (schedule range, noise level, ...)."""


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Discrete diffusion schedule over ``T`` timesteps.

    Timesteps are 1-based. Index 0 is the clean signal: ``alpha_bar(0) == 1``
    for VP and ``sigma(0) == 0`` for VE.

    Attributes:
        kind: ``"VP"`` or ``"VE"``.
        alphas: per-step retention factors (VP only), shape (T,).
        alpha_bars: running products of ``alphas`` (VP only), shape (T,).
        sigmas: noise levels (VE only), strictly increasing, shape (T,).
        params: construction parameters kept for serialization.
    """

    kind: str
    alphas: np.ndarray | None = None
    alpha_bars: np.ndarray | None = None
    sigmas: np.ndarray | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind == "VP":
            a = np.asarray(self.alphas, dtype=np.float64)
            if a.ndim != 1 or a.size < 1:
                raise ParameterError("alphas must be a non-empty 1-D array")
            if np.any(a <= 0) or np.any(a > 1):
                raise ParameterError("alphas must lie in (0, 1]")
            ab = np.cumprod(a) if self.alpha_bars is None else np.asarray(self.alpha_bars, dtype=np.float64)
            a.setflags(write=False)
            ab.setflags(write=False)
            object.__setattr__(self, "alphas", a)
            object.__setattr__(self, "alpha_bars", ab)
        elif self.kind == "VE":
            s = np.asarray(self.sigmas, dtype=np.float64)
            if s.ndim != 1 or s.size < 1:
                raise ParameterError("sigmas must be a non-empty 1-D array")
            if np.any(s <= 0) or np.any(np.diff(s) <= 0):
                raise ParameterError("sigmas must be positive and strictly increasing")
            s.setflags(write=False)
            object.__setattr__(self, "sigmas", s)
        else:
            raise ParameterError(f"unknown schedule kind {self.kind!r}")

    @property
    def T(self) -> int:
        return len(self.alphas) if self.kind == "VP" else len(self.sigmas)

    def _check_t(self, t: int, allow_zero: bool = True) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise IndexError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def alpha(self, t: int) -> float:
        self._require("VP")
        t = self._check_t(t)
        return 1.0 if t == 0 else float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._require("VP")
        t = self._check_t(t)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        self._require("VE")
        t = self._check_t(t)
        return 0.0 if t == 0 else float(self.sigmas[t - 1])

    def noise_var(self, t: int) -> float:
        """Variance of the noise in ``x_t``: ``1 - alpha_bar`` (VP) or ``sigma**2`` (VE)."""
        if self.kind == "VP":
            return 1.0 - self.alpha_bar(t)
        return self.sigma(t) ** 2

    def timestep_for_alpha_bar(self, target: float) -> int:
        """Timestep whose ``alpha_bar`` is closest to ``target``."""
        self._require("VP")
        return int(np.argmin(np.abs(self.alpha_bars - target))) + 1

    def _require(self, kind):
        if self.kind != kind:
            raise ParameterError(f"operation requires a {kind} schedule, got {self.kind}")

    def to_json(self) -> dict[str, Any]:
        if self.params:
            return {"kind": self.kind, "T": self.T, **self.params}
        if self.kind == "VP":
            return {"kind": "VP", "T": self.T, "alphas": self.alphas.tolist()}
        return {"kind": "VE", "T": self.T, "sigmas": self.sigmas.tolist()}

    @classmethod
    def from_json(cls, obj: dict | str) -> "NoiseSchedule":
        if isinstance(obj, str):
            obj = json.loads(obj)
        kind = obj.get("kind", "VP").upper()
        if kind == "VP":
            if "alphas" in obj:
                return cls("VP", alphas=np.asarray(obj["alphas"], dtype=np.float64))
            return make_linear_vp(obj["T"], obj.get("beta_min", 1e-4), obj.get("beta_max", 0.02))
        if kind == "VE":
            if "sigmas" in obj:
                return cls("VE", sigmas=np.asarray(obj["sigmas"], dtype=np.float64))
            return make_geometric_ve(obj["T"], obj.get("sigma_min", 0.01), obj.get("sigma_max", 50.0))
        raise ParameterError(f"unknown schedule kind {kind!r}")


def make_linear_vp(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear-beta VP schedule, ``alpha_t = 1 - beta_t``."""
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ParameterError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    betas = np.linspace(beta_min, beta_max, int(T), dtype=np.float64)
    return NoiseSchedule(
        "VP",
        alphas=1.0 - betas,
        params={"beta_min": float(beta_min), "beta_max": float(beta_max)},
    )


def make_geometric_ve(T: int, sigma_min: float = 0.01, sigma_max: float = 50.0) -> NoiseSchedule:
    """Geometric VE schedule from ``sigma_min`` (t=1) to ``sigma_max`` (t=T)."""
    if int(T) != T or T < 2:
        raise ParameterError(f"VE schedule needs T >= 2, got {T}")
    if not 0 < sigma_min < sigma_max:
        raise ParameterError(f"need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}")
    sigmas = np.geomspace(sigma_min, sigma_max, int(T))
    return NoiseSchedule(
        "VE",
        sigmas=sigmas,
        params={"sigma_min": float(sigma_min), "sigma_max": float(sigma_max)},
    )


def forward_perturb(s: NoiseSchedule, x0, t: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``x_t`` given ``x0``.

    VP: ``sqrt(abar) x0 + sqrt(1 - abar) n``; VE: ``x0 + sigma n``. Leading axes
    of ``x0`` are treated as a batch.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t = s._check_t(t, allow_zero=False)
    noise = rng.standard_normal(x0.shape)
    if s.kind == "VP":
        ab = s.alpha_bar(t)
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    return x0 + s.sigma(t) * noise


def k_t(s: NoiseSchedule, sigma0: float, t: int) -> float:
    """Measurement weight ``sqrt(1 - abar_t) / sigma0``."""
    if not sigma0 > 0:
        raise ParameterError(f"sigma0 must be positive, got {sigma0}")
    return float(np.sqrt(1.0 - s.alpha_bar(t)) / sigma0)


def v_t(s: NoiseSchedule, sigma0: float, t: int) -> float:
    """VE measurement weight ``sigma_t / sigma0``."""
    if not sigma0 > 0:
        raise ParameterError(f"sigma0 must be positive, got {sigma0}")
    return float(s.sigma(t) / sigma0)
