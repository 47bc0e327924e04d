"""Experiment runners behind the command line.

Every runner takes an :class:`ExperimentConfig`, writes its artifacts under
``cfg.output_dir`` and returns a :class:`RunResult`. CSV outputs depend only
on the config and seed; wall-clock timings go to JSON sidecars.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import operators as ops
from .estimator import (
    analytic_gaussian_affine,
    bayesian_loss,
    default_t_grid,
    fit_linear,
    training_pairs,
)
from .formats import config_hash, heat_levels, provenance, save_array, write_csv, write_pgm
from .priors import MixturePrior, bayesian_score, exact_posterior, post_conditioned_score, unconditional_score
from .samplers import ExactPrior, Langevin, SamplerConfig, SamplerError, atom_histogram, sample, tv_distance
from .schedule import NoiseSchedule
from .verify import run_checks

EXPERIMENTS = ("fig1", "sample_accuracy", "dc_check", "train_linear", "verify")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    parameters: dict = field(default_factory=dict)
    output_dir: Path = Path("out")
    seed: int = 0

    def __post_init__(self):
        self.experiment = self.experiment.replace("-", "_")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if not isinstance(self.parameters, dict):
            raise ConfigError("parameters must be a JSON object")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.seed = int(self.seed)
        self.output_dir = Path(self.output_dir)

    @classmethod
    def from_dict(cls, obj: dict, experiment: str | None = None, output_dir=None, seed=None):
        """Accepts ``{experiment, parameters, output_dir, seed}``; unknown top-level keys become parameters."""
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        obj = dict(obj)
        exp = experiment or obj.pop("experiment", None)
        obj.pop("experiment", None)
        if exp is None:
            raise ConfigError("experiment not given")
        params = obj.pop("parameters", None)
        out = obj.pop("output_dir", "out")
        s = obj.pop("seed", 0)
        if params is None:
            params = obj
        elif obj:
            raise ConfigError(f"unexpected top-level keys {sorted(obj)}")
        return cls(exp, params, output_dir if output_dir is not None else out, seed if seed is not None else s)

    def hash(self) -> str:
        return config_hash({"experiment": self.experiment, "parameters": self.parameters})

    def provenance(self) -> dict:
        return provenance({"experiment": self.experiment, "parameters": self.parameters}, self.seed)

    def rng(self, *key) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, *key]))


@dataclass
class RunResult:
    files: list
    ok: bool = True
    summary: dict = field(default_factory=dict)


def thread_count() -> int:
    raw = os.environ.get("BAYESCOND_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"BAYESCOND_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)


def _pmap(fn, items):
    n = thread_count()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(type(o))


def _outdir(cfg) -> Path:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir


def _meta(cfg) -> dict:
    p = cfg.provenance()
    return {"seed": p["seed"], "config_hash": p["config_hash"], "version": p["version"], "experiment": cfg.experiment}


# ---------------------------------------------------------------------------
# Problem builders


def fig1_problem(params: dict | None = None):
    """Two-dimensional masking problem: ``A = [1 0]``, ``y = -4``, twelve atoms.

    Ten atoms are uniform on ``[-2, 2]^2`` from a fixed generator (seed 42 by
    default), plus ``[-5, -5]`` and ``[3, 3]``. Returns ``(prior, op, y, sigma0)``.
    """
    params = params or {}
    rng = np.random.default_rng(params.get("atom_seed", 42))
    atoms = np.vstack([rng.uniform(-2.0, 2.0, (10, 2)), [[-5.0, -5.0], [3.0, 3.0]]])
    op = ops.Dense([[1.0, 0.0]])
    y = np.array([float(params.get("y", -4.0))])
    return MixturePrior.discrete(atoms), op, y, float(params.get("sigma0", 0.1))


def _problem(params: dict, base_dir=None):
    if params.get("problem", "fig1") == "fig1" and "prior" not in params:
        return fig1_problem(params)
    try:
        prior = MixturePrior.from_json(params["prior"])
        op = ops.operator_from_json(params["operator"], base_dir)
        y = np.asarray(params["y"], dtype=np.float64).reshape(-1)
        sigma0 = float(params["sigma0"])
    except KeyError as exc:
        raise ConfigError(f"missing parameter {exc}") from exc
    if y.size != op.m:
        raise ConfigError(f"measurement has {y.size} entries, operator expects {op.m}")
    return prior, op, y, sigma0


def _schedule(params: dict, default_kind="VP") -> NoiseSchedule:
    spec = params.get("schedule", {"kind": default_kind, "T": 1000})
    return NoiseSchedule.from_json(spec)


# ---------------------------------------------------------------------------
# fig1: two-dimensional masking demo


def score_fields(prior, op, y, sigma0, abar, points):
    """Norms of the unconditional, post-conditioned and Bayesian scores at ``points``."""
    su = unconditional_score(prior, abar, points).score
    sp = post_conditioned_score(prior, abar, op, points, y, sigma0).score
    sb = bayesian_score(prior, abar, op, points, y, sigma0).score
    norm = lambda s: np.linalg.norm(s, axis=-1)  # noqa: E731
    return {
        "unconditional": norm(su),
        "post_conditioned": norm(sp),
        "bayesian": norm(sb),
        "discrepancy": norm(sp - sb),
    }


def run_fig1(cfg: ExperimentConfig) -> RunResult:
    p = cfg.parameters
    prior, op, y, sigma0 = fig1_problem(p)
    lo, hi = p.get("grid", [-8.0, 8.0])
    n = int(p.get("resolution", 128))
    abars = [float(a) for a in p.get("abars", [0.9, 0.5, 0.1, 0.01])]
    out = _outdir(cfg)
    meta = _meta(cfg)

    # row 0 is the top of the image, so the vertical axis runs high to low
    xs = np.linspace(lo, hi, n)
    ys = xs[::-1]
    X1, X2 = np.meshgrid(xs, ys, indexing="xy")
    pts = np.stack([X1.ravel(), X2.ravel()], axis=-1)

    fields = _pmap(lambda a: score_fields(prior, op, y, sigma0, a, pts), abars)

    files, rows, raw = [], [], []
    for a, f in zip(abars, fields):
        rows.append([a, f["discrepancy"].mean(), f["discrepancy"].max()])
        for name in ("unconditional", "post_conditioned", "bayesian"):
            path = out / f"fig1_{name}_abar{a:g}.pgm"
            comment = " ".join(f"{k}={v}" for k, v in sorted(meta.items()))
            comment += " gray=round(255*log1p(|score|)/max(log1p(|score|)))"
            write_pgm(path, heat_levels(f[name].reshape(n, n)), comment)
            files.append(path)
        for k in range(pts.shape[0]):
            raw.append([a, pts[k, 0], pts[k, 1], f["unconditional"][k], f["post_conditioned"][k], f["bayesian"][k], f["discrepancy"][k]])

    disc = out / "fig1_discrepancy.csv"
    write_csv(disc, ["abar", "mean_discrepancy", "max_discrepancy"], rows, meta)
    sidecar = out / "fig1_fields.csv"
    write_csv(sidecar, ["abar", "x1", "x2", "unconditional", "post_conditioned", "bayesian", "discrepancy"], raw, meta)
    means = [r[1] for r in rows]
    increasing = bool(all(b > a for a, b in zip(means, means[1:])))
    manifest = {
        "provenance": cfg.provenance(),
        "atoms": prior.means,
        "atom_seed": p.get("atom_seed", 42),
        "atoms_note": "ten atoms uniform on [-2, 2]^2 from atom_seed, plus [-5, -5] and [3, 3]",
        "operator": op.to_json(),
        "y": y,
        "sigma0": sigma0,
        "grid": [lo, hi, n],
        "abars": abars,
        "mean_discrepancy": means,
        "increasing_as_abar_decreases": increasing,
        "files": [f.name for f in files + [disc, sidecar]],
    }
    files += [disc, sidecar, _write_json(out / "fig1_manifest.json", manifest)]
    return RunResult(files, True, {"mean_discrepancy": dict(zip(abars, means)), "increasing": increasing})


# ---------------------------------------------------------------------------
# Sampler accuracy


def run_sample_accuracy(cfg: ExperimentConfig) -> RunResult:
    p = cfg.parameters
    prior, op, y, sigma0 = _problem(p)
    if prior.kind != "discrete":
        raise ConfigError("sample_accuracy needs a discrete prior")
    s = _schedule(p)
    modes = list(p.get("modes", ["bayesian", "post_conditioned"]))
    n_chains = int(p.get("n_chains", 2000))
    n_avg = int(p.get("n_avg", 10))
    corrector = Langevin(**p["corrector"]) if p.get("corrector") else None
    out = _outdir(cfg)
    meta = _meta(cfg)

    exact = exact_posterior(prior, op, y, sigma0)
    exact_mean = exact @ prior.means

    def run(i):
        sc = SamplerConfig(
            s, ExactPrior(prior), modes[i], sigma0,
            seed=int(np.random.SeedSequence([cfg.seed, i]).generate_state(1, np.uint64)[0]),
            n_chains=n_chains, corrector=corrector,
        )
        t0 = time.perf_counter()
        try:
            x = sample(sc, op, y).x0_estimate
        except SamplerError as exc:
            # a diverging chain is a measurement, not a crash
            return exc.t, time.perf_counter() - t0
        return x, time.perf_counter() - t0

    results = _pmap(run, range(len(modes)))

    rows, hists, timings, files = [], [], {}, []
    nan = float("nan")
    for mode, (x, dt) in zip(modes, results):
        timings[mode] = dt
        if not isinstance(x, np.ndarray):
            rows.append([mode, nan, nan, nan, n_chains, f"diverged_t{x}"])
            hists.append(np.full(prior.N, nan))
            continue
        hist = atom_histogram(x, prior.means)
        single = np.mean(np.sum((x - exact_mean) ** 2, axis=-1))
        k = (x.shape[0] // n_avg) * n_avg
        avg = x[:k].reshape(-1, n_avg, x.shape[1]).mean(axis=1)
        averaged = np.mean(np.sum((avg - exact_mean) ** 2, axis=-1)) if k else float("nan")
        rows.append([mode, tv_distance(hist, exact), single, averaged, n_chains, "ok"])
        hists.append(hist)
        path = out / f"samples_{mode}.bcnd"
        save_array(path, x)
        files.append(path)

    acc = out / "sample_accuracy.csv"
    write_csv(acc, ["mode", "tv", "mse_single", f"mse_avg{n_avg}", "n_chains", "status"], rows, meta)
    hist_csv = out / "sample_accuracy_hist.csv"
    hist_rows = [[i, *prior.means[i], exact[i], *[h[i] for h in hists]] for i in range(prior.N)]
    coords = [f"atom_x{j + 1}" for j in range(prior.d)]
    write_csv(hist_csv, ["atom", *coords, "exact", *modes], hist_rows, meta)
    tv = {r[0]: r[1] for r in rows}
    record = {
        "provenance": cfg.provenance(),
        "schedule": s.to_json(),
        "modes": modes,
        "tv": tv,
        "mse_reference": "exact posterior mean E[x0 | y]",
        "timings_s": timings,
        "arrays": {f.stem.removeprefix("samples_"): f.name for f in files},
    }
    files += [acc, hist_csv, _write_json(out / "sample_accuracy_run.json", record)]
    return RunResult(files, True, {"tv": tv})


# ---------------------------------------------------------------------------
# DC solver cross-check

DENSE_LIMIT = 256


def _dc_operators(dims, rng):
    d = int(np.prod(dims))
    yield "identity", ops.Identity(d)
    yield "inpaint_mask", ops.InpaintMask((rng.random(d) < 0.5).astype(float))
    yield "fourier_mask", ops.FourierMask(ops.random_fourier_mask(dims, 0.3, rng), dims)
    yield "fourier_filter", ops.FourierFilter(ops.gaussian_blur_spectrum(dims, 1.5), dims)
    yield "box_downsample", ops.BoxDownsample(dims, tuple(2 if n % 2 == 0 else 1 for n in dims))
    if d <= DENSE_LIMIT:
        yield "dense", ops.Dense(rng.standard_normal((max(1, d // 2), d)) / np.sqrt(d))


def _dense_dc(L, x_d, xhat, lam):
    A = ops.to_dense(L.base)
    evals, V = np.linalg.eigh(L.abar * np.eye(L.d) + L.c * A.T @ A)
    At = (V * np.sqrt(np.clip(evals, 0, None))) @ V.T
    return np.linalg.solve(np.eye(L.d) + lam * At.T @ At, x_d + lam * At.T @ xhat)


def _rel(a, b):
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / nb) if nb > 0 else float(np.linalg.norm(a - b))


def run_dc_check(cfg: ExperimentConfig) -> RunResult:
    p = cfg.parameters
    sizes = [tuple(int(n) for n in s) for s in p.get("sizes", [[4, 4], [8, 8], [16, 16], [64, 64]])]
    lams = [float(v) for v in p.get("lambdas", [0.0, 0.01, 1.0, 100.0])]
    abar = float(p.get("abar", 0.5))
    sigma0 = float(p.get("sigma0", 0.1))
    tol = float(p.get("tolerance", 1e-8))
    kt = np.sqrt(1 - abar) / sigma0
    out = _outdir(cfg)
    meta = _meta(cfg)

    jobs = []
    for si, dims in enumerate(sizes):
        rng = cfg.rng(si)
        for variant, op in _dc_operators(dims, rng):
            L = ops.LiftedOperator(op, abar, kt)
            for lam in lams:
                x_d, xhat = rng.standard_normal((2, op.d))
                jobs.append((variant, dims, lam, L, x_d, xhat))

    def run(job):
        variant, dims, lam, L, x_d, xhat = job
        t0 = time.perf_counter()
        closed = ops.dc_solve(L, x_d, xhat, lam)
        t1 = time.perf_counter()
        cg = ops.dc_solve(L, x_d, xhat, lam, method="cg")
        t2 = time.perf_counter()
        dense = _dense_dc(L, x_d, xhat, lam) if L.d <= DENSE_LIMIT else None
        err_dense = _rel(closed, dense) if dense is not None else float("nan")
        return _rel(closed, cg), err_dense, t1 - t0, t2 - t1

    results = _pmap(run, jobs)
    rows, timings, worst = [], [], 0.0
    for (variant, dims, lam, L, _, _), (e_cg, e_dense, tc, tg) in zip(jobs, results):
        dims_s = "x".join(map(str, dims))
        rows.append([variant, dims_s, L.d, lam, e_cg, e_dense])
        timings.append({"variant": variant, "dims": dims_s, "lambda": lam, "closed_s": tc, "cg_s": tg})
        worst = max(worst, e_cg, 0.0 if np.isnan(e_dense) else e_dense)

    csv = out / "dc_check.csv"
    write_csv(csv, ["variant", "dims", "d", "lambda", "rel_err_closed_vs_cg", "rel_err_closed_vs_dense"], rows, meta)
    side = _write_json(out / "dc_check_timings.json", {"provenance": cfg.provenance(), "timings": timings})
    ok = worst < tol
    return RunResult([csv, side], ok, {"max_rel_error": worst, "tolerance": tol})


# ---------------------------------------------------------------------------
# Linear estimator training


def run_train_linear(cfg: ExperimentConfig) -> RunResult:
    p = cfg.parameters
    d = int(p.get("d", 4))
    if "prior" in p:
        prior = MixturePrior.from_json(p["prior"])
    else:
        prior = MixturePrior.gaussian(np.zeros(d), np.eye(d)[None])
    op = ops.operator_from_json(p.get("operator", {"variant": "identity", "d": prior.d}))
    sigma0 = float(p.get("sigma0", 0.5))
    s = _schedule(p)
    t_grid = np.asarray(p["t_grid"]) if "t_grid" in p else default_t_grid(s, int(p.get("n_grid", 16)))
    n_samples = int(p.get("n_samples", 100_000))
    n_heldout = int(p.get("n_heldout", 10_000))
    out = _outdir(cfg)
    meta = _meta(cfg)

    est = fit_linear(prior, op, s, sigma0, t_grid, n_samples, cfg.rng(0), threads=thread_count())
    est_dir = out / "estimator"
    est.save(est_dir, config_hash(prior.to_json()))

    single_gaussian = prior.kind == "gaussian" and prior.N == 1
    held = cfg.rng(1).spawn(len(t_grid))
    rows = []
    for i, t in enumerate(est.t_grid):
        xhat, x0, L = training_pairs(prior, op, s, sigma0, int(t), n_heldout, held[i])
        loss = bayesian_loss(lambda z: est(z, t), xhat, x0)
        if single_gaussian:
            W, b = analytic_gaussian_affine(prior.means[0], prior.covs[0], L)
            rel = float(np.linalg.norm(est.W[i] - W) / np.linalg.norm(W))
            bayes = bayesian_loss(lambda z: z @ W.T + b, xhat, x0)
        else:
            rel = bayes = float("nan")
        rows.append([int(t), L.abar, rel, loss, bayes, est.report[int(t)]["condition"]])

    csv = out / "train_linear.csv"
    write_csv(csv, ["t", "abar", "rel_frobenius_error", "heldout_loss", "analytic_loss", "condition"], rows, meta)
    _write_json(est_dir / "provenance.json", cfg.provenance())
    worst = max((r[2] for r in rows), default=float("nan"))
    return RunResult([csv, est_dir / "manifest.json"], True, {"max_rel_frobenius_error": worst})


# ---------------------------------------------------------------------------
# Verification


def run_verify(cfg: ExperimentConfig) -> RunResult:
    p = cfg.parameters
    report = run_checks(cfg.seed, fault=p.get("fault"), names=p.get("checks"), threads=thread_count())
    out = _outdir(cfg)
    ok = all(r["status"] == "pass" for r in report)
    path = _write_json(out / "verify_report.json", {"provenance": cfg.provenance(), "ok": ok, "checks": report})
    return RunResult([path], ok, {"failed": [r["check"] for r in report if r["status"] != "pass"]})


RUNNERS = {
    "fig1": run_fig1,
    "sample_accuracy": run_sample_accuracy,
    "dc_check": run_dc_check,
    "train_linear": run_train_linear,
    "verify": run_verify,
}


def run(cfg: ExperimentConfig) -> RunResult:
    return RUNNERS[cfg.experiment](cfg)
