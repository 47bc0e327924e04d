"""Structured linear forward operators and their timestep-lifted algebra.

Every operator ``A`` here has a Gram matrix ``A^T A`` that is diagonal in a
known orthonormal basis (pixels, unitary Fourier modes, block-constant
subspace, or an eigenbasis for dense matrices). The lifted operator

    A_t = (abar I + k^2 A^T A)^(1/2)

and the data-consistency solve are spectral functions of that Gram matrix, so
each variant only has to know how to apply ``f(A^T A)``. Box downsampling
overrides the lifted paths with its Woodbury closed forms.

All vectors live on the last axis; leading axes are batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.sparse.linalg import LinearOperator as _ScipyOperator
from scipy.sparse.linalg import cg

from .schedule import NoiseSchedule, ParameterError, k_t, v_t

DENSE_BUDGET = 4096


class ShapeError(ValueError):
    pass


class ResourceError(RuntimeError):
    pass


class SolverError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def _as_vec(x, n, what="x"):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != n:
        raise ShapeError(f"{what} has trailing dimension {x.shape[-1:]} but {n} was expected")
    return x


def _reflect(a: np.ndarray) -> np.ndarray:
    """``a[-k mod n]`` along every axis."""
    axes = tuple(range(a.ndim))
    return np.roll(np.flip(a, axes), 1, axes)


class LinearOperator:
    """Base class: ``d`` inputs, ``m`` outputs."""

    variant = "abstract"
    d: int
    m: int

    def apply(self, x):
        raise NotImplementedError

    def adjoint(self, y):
        raise NotImplementedError

    def gram_function(self, x, f: Callable[[np.ndarray], np.ndarray]):
        """Apply ``f(A^T A)`` to ``x`` where ``f`` acts on Gram eigenvalues."""
        raise NotImplementedError

    # Lifted paths with a = abar, c = k^2. Subclasses may specialize.
    def lifted_sqrt(self, x, a, c):
        return self.gram_function(x, lambda g: np.sqrt(a + c * g))

    def lifted_inv_sqrt(self, x, a, c):
        return self.gram_function(x, lambda g: 1.0 / np.sqrt(a + c * g))

    def lifted_dc(self, rhs, a, c, lam):
        return self.gram_function(rhs, lambda g: 1.0 / (1.0 + lam * (a + c * g)))

    def to_json(self) -> dict:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(d={self.d}, m={self.m})"


class Identity(LinearOperator):
    variant = "identity"

    def __init__(self, d: int):
        self.d = self.m = int(d)

    def apply(self, x):
        return _as_vec(x, self.d).copy()

    def adjoint(self, y):
        return _as_vec(y, self.m, "y").copy()

    def gram_function(self, x, f):
        return f(np.float64(1.0)) * _as_vec(x, self.d)

    def to_json(self):
        return {"variant": self.variant, "d": self.d}


class InpaintMask(LinearOperator):
    """Pixel mask ``M = diag(mask)``; removed pixels read as zero."""

    variant = "inpaint_mask"

    def __init__(self, mask):
        mask = np.asarray(mask, dtype=np.float64).ravel()
        if not np.all((mask == 0) | (mask == 1)):
            raise ParameterError("mask entries must be 0 or 1")
        mask.setflags(write=False)
        self.mask = mask
        self.d = self.m = mask.size

    def apply(self, x):
        return self.mask * _as_vec(x, self.d)

    def adjoint(self, y):
        return self.mask * _as_vec(y, self.m, "y")

    def gram_function(self, x, f):
        return f(self.mask) * _as_vec(x, self.d)

    def to_json(self):
        return {"variant": self.variant, "mask": self.mask.tolist()}


class _FourierDiagonal(LinearOperator):
    """Real operator ``F^H diag(h) F`` on a grid, with unitary FFTs."""

    def __init__(self, h, dims):
        dims = tuple(int(n) for n in np.atleast_1d(dims))
        h = np.asarray(h, dtype=np.float64).reshape(dims)
        if not np.allclose(h, _reflect(h), rtol=0, atol=1e-12):
            raise ParameterError("Fourier-domain weights must be conjugate symmetric")
        h = 0.5 * (h + _reflect(h))
        h.setflags(write=False)
        self.dims = dims
        self._h = h
        self.d = self.m = int(np.prod(dims))

    def _filter(self, x, weights):
        x = _as_vec(x, self.d)
        axes = tuple(range(-len(self.dims), 0))
        grid = x.reshape(x.shape[:-1] + self.dims)
        out = np.fft.ifftn(weights * np.fft.fftn(grid, axes=axes, norm="ortho"), axes=axes, norm="ortho")
        return out.real.reshape(x.shape)

    def apply(self, x):
        return self._filter(x, self._h)

    def adjoint(self, y):
        return self._filter(y, self._h)

    def gram_function(self, x, f):
        return self._filter(x, f(self._h ** 2))


class FourierMask(_FourierDiagonal):
    """Undersampled Fourier measurement ``M F``, represented in the image domain.

    ``apply`` returns the zero-filled image ``F^H M F x``. Because ``M`` is a
    conjugate-symmetric 0/1 mask this is a real orthogonal projection with the
    same Gram matrix and likelihood as the k-space measurement.
    """

    variant = "fourier_mask"

    def __init__(self, kmask, dims):
        kmask = np.asarray(kmask, dtype=np.float64)
        if not np.all((kmask == 0) | (kmask == 1)):
            raise ParameterError("k-space mask entries must be 0 or 1")
        super().__init__(kmask, dims)

    @property
    def kmask(self):
        return self._h

    def to_json(self):
        return {"variant": self.variant, "dims": list(self.dims), "mask": self._h.ravel().tolist()}


class FourierFilter(_FourierDiagonal):
    """Circular convolution with a symmetric kernel, given by its transfer magnitude ``|H|``."""

    variant = "fourier_filter"

    def __init__(self, spectrum, dims):
        spectrum = np.asarray(spectrum, dtype=np.float64)
        if np.any(spectrum < 0):
            raise ParameterError("spectrum magnitudes must be nonnegative")
        super().__init__(spectrum, dims)

    @property
    def spectrum(self):
        return self._h

    def to_json(self):
        return {"variant": self.variant, "dims": list(self.dims), "spectrum": self._h.ravel().tolist()}


class BoxDownsample(LinearOperator):
    """Block-sum downsampling scaled by ``1/sqrt(r)`` so that ``A A^T = I``.

    ``dims`` is the image grid and ``block`` the block shape per axis; ``r`` is
    the number of pixels per block. Output entries are ordered row-major over
    the block grid.
    """

    variant = "box_downsample"

    def __init__(self, dims, block):
        self.dims = tuple(int(n) for n in np.atleast_1d(dims))
        self.block = tuple(int(b) for b in np.atleast_1d(block))
        if len(self.dims) != len(self.block):
            raise ParameterError("dims and block must have the same length")
        if any(b < 1 or n % b for n, b in zip(self.dims, self.block)):
            raise ParameterError(f"block {self.block} must divide grid {self.dims}")
        self.r = int(np.prod(self.block))
        self.d = int(np.prod(self.dims))
        self.m = self.d // self.r
        split = []
        for n, b in zip(self.dims, self.block):
            split += [n // b, b]
        self._split = tuple(split)
        self._inner = tuple(range(-2 * len(self.dims) + 1, 0, 2))

    def _block_sums(self, x):
        lead = x.shape[:-1]
        return x.reshape(lead + self._split).sum(axis=self._inner).reshape(lead + (self.m,))

    def _spread(self, y):
        lead = y.shape[:-1]
        coarse = tuple(n // b for n, b in zip(self.dims, self.block))
        y = y.reshape(lead + coarse)
        for ax, b in enumerate(self.block):
            y = np.repeat(y, b, axis=len(lead) + ax)
        return y.reshape(lead + (self.d,))

    def apply(self, x):
        return self._block_sums(_as_vec(x, self.d)) / np.sqrt(self.r)

    def adjoint(self, y):
        return self._spread(_as_vec(y, self.m, "y")) / np.sqrt(self.r)

    def block_mean(self, x):
        """Projection onto block-constant images, ``(1/r) ones(r)`` per block."""
        return self._spread(self._block_sums(x)) / self.r

    def gram_function(self, x, f):
        x = _as_vec(x, self.d)
        p = self.block_mean(x)
        return f(np.float64(0.0)) * (x - p) + f(np.float64(1.0)) * p

    def lifted_sqrt(self, x, a, c):
        x = _as_vec(x, self.d)
        sa = np.sqrt(a)
        return sa * x + (np.sqrt(c + a) - sa) * self.block_mean(x)

    def lifted_inv_sqrt(self, x, a, c):
        # Woodbury: (1/sqrt(a)) (I - (sqrt(c+a) - sqrt(a)) / (r sqrt(c+a)) ones(r))
        x = _as_vec(x, self.d)
        sa, sca = np.sqrt(a), np.sqrt(c + a)
        return (x - (sca - sa) / sca * self.block_mean(x)) / sa

    def lifted_dc(self, rhs, a, c, lam):
        # Woodbury: 1/(1 + lam a) (I - lam c / (r (1 + lam a + lam c)) ones(r))
        rhs = _as_vec(rhs, self.d)
        coef = lam * c / (1.0 + lam * a + lam * c)
        return (rhs - coef * self.block_mean(rhs)) / (1.0 + lam * a)

    def to_json(self):
        return {"variant": self.variant, "dims": list(self.dims), "block": list(self.block)}


class Dense(LinearOperator):
    """Explicit ``m x d`` matrix; the verification oracle for every other variant."""

    variant = "dense"

    def __init__(self, matrix):
        matrix = np.array(matrix, dtype=np.float64, ndmin=2)
        matrix.setflags(write=False)
        self.matrix = matrix
        self.m, self.d = matrix.shape
        evals, evecs = np.linalg.eigh(matrix.T @ matrix)
        self._evals = np.maximum(evals, 0.0)
        self._evecs = evecs

    def apply(self, x):
        return _as_vec(x, self.d) @ self.matrix.T

    def adjoint(self, y):
        return _as_vec(y, self.m, "y") @ self.matrix

    def gram_function(self, x, f):
        x = _as_vec(x, self.d)
        V = self._evecs
        return ((x @ V) * f(self._evals)) @ V.T

    def to_json(self):
        return {"variant": self.variant, "matrix": self.matrix.tolist()}


def to_dense(op, budget: int = DENSE_BUDGET) -> np.ndarray:
    """Materialize ``op`` column by column from basis-vector probes."""
    if op.d > budget:
        raise ResourceError(f"dimension {op.d} exceeds dense budget {budget}")
    return np.ascontiguousarray(op.apply(np.eye(op.d)).T)


def apply(op: LinearOperator, x):
    return op.apply(x)


def apply_adjoint(op: LinearOperator, y):
    return op.adjoint(y)


# ---------------------------------------------------------------------------
# Lifted operator


@dataclass(frozen=True, eq=False)
class LiftedOperator:
    """``A_t = (abar I + kt^2 A^T A)^(1/2)`` together with its noise level.

    For VE schedules ``abar`` is 1 and ``kt`` holds ``v_t = sigma_t / sigma0``.
    ``noise_var`` is the variance of the whitened noise: ``1 - abar`` (VP) or
    ``sigma_t^2`` (VE).
    """

    base: LinearOperator
    abar: float
    kt: float
    t: int | None = None
    noise_var: float | None = None

    def __post_init__(self):
        if not 0 < self.abar <= 1:
            raise ParameterError(f"abar must lie in (0, 1], got {self.abar}")
        if self.noise_var is None:
            object.__setattr__(self, "noise_var", 1.0 - self.abar)

    @property
    def d(self):
        return self.base.d

    @property
    def m(self):
        return self.base.d

    @property
    def c(self):
        return self.kt ** 2

    def apply_At(self, x):
        return self.base.lifted_sqrt(x, self.abar, self.c)

    def apply_At_inv(self, x):
        return self.base.lifted_inv_sqrt(x, self.abar, self.c)

    # A_t is symmetric, so it also serves as a plain linear operator.
    def apply(self, x):
        return self.apply_At(x)

    def adjoint(self, y):
        return self.apply_At(y)

    def gram(self, x):
        """``A_t^T A_t x = abar x + kt^2 A^T A x``."""
        x = np.asarray(x, dtype=np.float64)
        return self.abar * x + self.c * self.base.adjoint(self.base.apply(x))

    def to_dense(self, budget: int = DENSE_BUDGET):
        return to_dense(self, budget)


def lift(op: LinearOperator, s: NoiseSchedule, sigma0: float, t: int) -> LiftedOperator:
    """Lift ``op`` to timestep ``t`` of ``s`` (VP or VE)."""
    if s.kind == "VP":
        s._check_t(t, allow_zero=False)
        return LiftedOperator(op, s.alpha_bar(t), k_t(s, sigma0, t), t=int(t))
    s._check_t(t, allow_zero=False)
    return LiftedOperator(op, 1.0, v_t(s, sigma0, t), t=int(t), noise_var=s.sigma(t) ** 2)


def apply_At(L: LiftedOperator, x):
    return L.apply_At(x)


def apply_At_inv(L: LiftedOperator, x):
    return L.apply_At_inv(x)


def whiten_combine(L: LiftedOperator, x_t, y) -> np.ndarray:
    """Whitened combination ``A_t^{-1} (sqrt(abar) x_t + kt^2 A^T y)``.

    The result satisfies ``xhat = A_t x0 + sqrt(noise_var) n`` with white ``n``.
    """
    x_t = _as_vec(x_t, L.d, "x_t")
    y = _as_vec(y, L.base.m, "y")
    return L.apply_At_inv(np.sqrt(L.abar) * x_t + L.c * L.base.adjoint(y))


def dc_solve(L: LiftedOperator, x_d, xhat, lambda_t: float, method: str = "closed") -> np.ndarray:
    """Proximal data-consistency step.

    Returns ``argmin_x 0.5 |x - x_d|^2 + 0.5 lambda_t |A_t x - xhat|^2``,
    i.e. ``(I + lambda_t A_t^T A_t)^{-1} (x_d + lambda_t A_t^T xhat)``.

    ``method="closed"`` uses the operator's closed form; ``"cg"`` runs
    conjugate gradients on the normal equations (relative residual 1e-10,
    at most ``10 d`` iterations).
    """
    if lambda_t < 0:
        raise ParameterError(f"lambda_t must be nonnegative, got {lambda_t}")
    x_d = _as_vec(x_d, L.d, "x_d")
    xhat = _as_vec(xhat, L.d, "xhat")
    if lambda_t == 0:
        return x_d.copy()
    rhs = x_d + lambda_t * L.apply_At(xhat)
    if method == "closed":
        return L.base.lifted_dc(rhs, L.abar, L.c, lambda_t)
    if method == "cg":
        return _dc_cg(L, rhs, lambda_t)
    raise ParameterError(f"unknown dc method {method!r}")


def _dc_cg(L, rhs, lam, rtol=1e-10):
    d = L.d
    normal = _ScipyOperator(
        (d, d), matvec=lambda v: v + lam * L.gram(v), dtype=np.float64
    )
    flat = rhs.reshape(-1, d)
    out = np.empty_like(flat)
    for i, b in enumerate(flat):
        bnorm = np.linalg.norm(b)
        if bnorm == 0:
            out[i] = 0.0
            continue
        x, info = cg(normal, b, rtol=rtol, atol=0.0, maxiter=10 * d)
        res = np.linalg.norm(b - normal.matvec(x)) / bnorm
        if info != 0 and res > 10 * rtol:
            raise SolverError(f"CG did not converge (relative residual {res:.3e})", residual=res)
        out[i] = x
    return out.reshape(rhs.shape)


# ---------------------------------------------------------------------------
# Operator construction helpers


def conjugate_symmetrize_mask(mask) -> np.ndarray:
    """Smallest conjugate-symmetric 0/1 mask containing ``mask``."""
    mask = np.asarray(mask) > 0
    return (mask | _reflect(mask)).astype(np.float64)


def random_fourier_mask(dims, keep_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Random conjugate-symmetric k-space mask; the DC sample is always kept."""
    dims = tuple(np.atleast_1d(dims))
    raw = rng.random(dims) < keep_fraction / 2
    raw.flat[0] = True
    return conjugate_symmetrize_mask(raw)


def gaussian_blur_spectrum(dims, std: float) -> np.ndarray:
    """Transfer magnitude ``|H|`` of a circular Gaussian blur centred at the origin."""
    dims = tuple(int(n) for n in np.atleast_1d(dims))
    grids = np.meshgrid(*[np.minimum(np.arange(n), n - np.arange(n)) for n in dims], indexing="ij")
    kernel = np.exp(-sum(g.astype(float) ** 2 for g in grids) / (2 * std ** 2))
    kernel /= kernel.sum()
    # Unitary FFT scaling: A = F^H diag(H) F is convolution when H = sqrt(d) * F(kernel).
    H = np.abs(np.fft.fftn(kernel))
    return 0.5 * (H + _reflect(H))


def operator_from_json(obj: dict, base_dir=None) -> LinearOperator:
    """Build an operator from a JSON descriptor.

    Arrays are given inline (``mask``, ``spectrum``, ``matrix``) or as files
    (``mask_path``, ``spectrum_path``, ``matrix_path``) relative to ``base_dir``.
    """
    from .formats import load_array

    def arr(key):
        if key in obj:
            return np.asarray(obj[key], dtype=np.float64)
        path_key = key + "_path"
        if path_key in obj:
            from pathlib import Path

            p = Path(obj[path_key])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            return load_array(p)
        raise ParameterError(f"operator descriptor missing {key!r}")

    variant = obj.get("variant")
    if variant == "identity":
        return Identity(obj["d"])
    if variant == "inpaint_mask":
        return InpaintMask(arr("mask"))
    if variant == "fourier_mask":
        return FourierMask(arr("mask"), obj["dims"])
    if variant == "fourier_filter":
        if "blur_std" in obj:
            return FourierFilter(gaussian_blur_spectrum(obj["dims"], obj["blur_std"]), obj["dims"])
        return FourierFilter(arr("spectrum"), obj["dims"])
    if variant == "box_downsample":
        return BoxDownsample(obj["dims"], obj["block"])
    if variant == "dense":
        return Dense(arr("matrix"))
    raise ParameterError(f"unknown operator variant {variant!r}")
