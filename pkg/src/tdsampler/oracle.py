"""Ground-truth conditional means, error metrics and the benchmark sweep."""

from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from .errors import DomainError, UnsupportedCombination
from .schedule import NoiseSchedule, reverse_transition_params
from .score_model import AnalyticTarget, GaussianTarget, GMMTarget, denoiser, denoiser_at_zero
from .smc import (
    Method,
    Resampling,
    SamplerConfig,
    StepCache,
    check_compatible,
    ess,
    estimate_conditional_mean,
    run_sampler,
)
from .twisting import (
    FinalStep,
    Flat,
    Inpaint,
    InpaintDOF,
    Likelihood,
    SmoothNorm,
    TwistConfig,
    log_likelihood,
)
from .rng import Stream, normals

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GridSpec:
    lo: Tuple[float, ...] = (-6.0, -6.0)
    hi: Tuple[float, ...] = (6.0, 6.0)
    points_per_dim: int = 1024

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or any(a >= b for a, b in zip(lo, hi)):
            raise ValueError("grid needs lo < hi componentwise")
        if self.points_per_dim < 2:
            raise ValueError("points_per_dim must be >= 2")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def enlarged(self) -> "GridSpec":
        """Twice the extent around the same center, same spacing."""
        c = [(a + b) / 2 for a, b in zip(self.lo, self.hi)]
        h = [(b - a) for a, b in zip(self.lo, self.hi)]
        return GridSpec(
            tuple(ci - hi_ for ci, hi_ in zip(c, h)),
            tuple(ci + hi_ for ci, hi_ in zip(c, h)),
            2 * self.points_per_dim - 1,
        )


# --- oracles -------------------------------------------------------------------------


def _slice_gaussian(target: GaussianTarget, mask, y):
    """Conditional mean given ``x[mask] = y`` and log marginal density of that slice."""
    d = target.dim
    M = list(mask)
    U = [i for i in range(d) if i not in M]
    mu, S = target.mean, target.covariance
    S_MM = S[np.ix_(M, M)]
    r = np.asarray(y) - mu[M]
    f = cho_factor(S_MM)
    out = np.empty(d)
    out[M] = y
    out[U] = mu[U] + S[np.ix_(U, M)] @ cho_solve(f, r)
    logdet = 2.0 * np.sum(np.log(np.diag(f[0])))
    logm = -0.5 * (r @ cho_solve(f, r) + logdet + len(M) * _LOG_2PI)
    return out, logm


def _slice_gmm(target: GMMTarget, mask, y):
    d = target.dim
    M = list(mask)
    U = [i for i in range(d) if i not in M]
    r = np.asarray(y) - target.means[:, M]
    v = target.iso_var
    logc = (
        np.log(target.weights)
        - 0.5 * np.sum(r * r, axis=1) / v
        - 0.5 * len(M) * (_LOG_2PI + np.log(v))
    )
    logm = logsumexp(logc)
    resp = np.exp(logc - logm)
    out = np.empty(d)
    out[M] = y
    out[U] = resp @ target.means[:, U]
    return out, float(logm)


def _slice(target, mask, y):
    if isinstance(target, GaussianTarget):
        return _slice_gaussian(target, mask, y)
    if isinstance(target, GMMTarget):
        return _slice_gmm(target, mask, y)
    raise TypeError(f"no closed-form slice for {type(target).__name__}")


def _grid_moments(target, lik, gamma, grid: GridSpec, inner: Optional[GridSpec] = None):
    axes = [np.linspace(a, b, grid.points_per_dim) for a, b in zip(grid.lo, grid.hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    logf = target.logpdf(pts) + gamma * log_likelihood(lik, pts)
    shift = np.max(logf)
    f = np.exp(logf - shift).reshape(mesh[0].shape)

    def integrate(vals):
        out = vals
        for ax in reversed(axes):
            out = trapezoid(out, ax, axis=-1)
        return out

    mass = integrate(f)
    if inner is not None:
        # share of the mass lying outside the inner box
        outside = np.zeros(f.shape, dtype=bool)
        for m, a, b in zip(mesh, inner.lo, inner.hi):
            outside |= (m < a) | (m > b)
        return integrate(np.where(outside, f, 0.0)) / mass
    first = np.array([integrate(f * m) for m in mesh])
    return mass * np.exp(shift), first / mass


def conditional_mean_oracle(
    target: AnalyticTarget,
    lik: Likelihood,
    gamma: float = 1.0,
    grid: Optional[GridSpec] = None,
    check_mass: bool = True,
) -> np.ndarray:
    """``E[x0 | y]`` under ``q(x0) p(y | x0)^gamma``.

    Point-mass likelihoods are handled in closed form (``gamma`` has no effect
    on a delta); the smooth norm likelihood is integrated on a 2-d grid.
    """
    if isinstance(lik, Flat):
        return target.mean
    if isinstance(lik, Inpaint):
        lik.validate(target.dim)
        return _slice(target, lik.mask, lik.y)[0]
    if isinstance(lik, InpaintDOF):
        lik.validate(target.dim)
        parts = [_slice(target, M, lik.y) for M in lik.mask_set]
        logm = np.array([p[1] for p in parts])
        w = np.exp(logm - logsumexp(logm))
        return w @ np.stack([p[0] for p in parts])
    if isinstance(lik, SmoothNorm):
        if target.dim != 2:
            raise UnsupportedCombination("grid integration is implemented for d = 2")
        grid = grid or GridSpec()
        _, mean = _grid_moments(target, lik, gamma, grid)
        if check_mass:
            lost = _grid_moments(target, lik, gamma, grid.enlarged(), inner=grid)
            if lost > 1e-6:
                raise DomainError(
                    f"grid [{grid.lo}, {grid.hi}] misses {lost:.3g} of the mass"
                )
        return mean
    raise TypeError(f"unknown likelihood {lik!r}")


def estimation_error(estimate, oracle_mean) -> float:
    return float(np.linalg.norm(np.asarray(estimate, float) - np.asarray(oracle_mean, float)))


def fit_loglog_slope(rows: Iterable[Tuple[float, float]]) -> float:
    """Least-squares slope of ``log(mse)`` against ``log(K)``."""
    rows = list(rows)
    K = np.array([r[0] for r in rows], dtype=float)
    mse = np.array([r[1] for r in rows], dtype=float)
    if np.any(~(mse > 0)) or np.any(~np.isfinite(mse)):
        raise ValueError("mean squared errors must be positive and finite")
    if np.unique(K).size < 3:
        raise ValueError("need at least 3 distinct K values")
    return float(np.polyfit(np.log(K), np.log(mse), 1)[0])


# --- exact twisting for linear-Gaussian models ---------------------------------------------


class ExactLinearGaussianKernel:
    """Optimal twisting for a Gaussian target and an inpainting observation.

    With an affine score, every reverse transition is
    ``x^{t-1} = F_t x^t + g_t + sigma_t * eps``, so ``p(x0 | x^t)`` is Gaussian
    with mean ``B_t x + b_t`` and covariance ``C_t``.  The twist is the exact
    ``log p(y | x^t)`` and proposals are the exact conditionals
    ``p(x^{t-1} | x^t, y)``; incremental weights are then constant.
    """

    conditional = True

    def __init__(self, target: GaussianTarget, lik: Inpaint, s: NoiseSchedule):
        if not isinstance(target, GaussianTarget) or not isinstance(lik, Inpaint):
            raise UnsupportedCombination("exact twisting needs a Gaussian target and inpainting")
        lik.validate(target.dim)
        self.target, self.lik, self.s = target, lik, s
        self.twist_cfg = TwistConfig(final_step=FinalStep.EXACT, data_var=1.0)
        d = self.dim = target.dim
        self.M = list(lik.mask)
        eye = np.eye(d)
        self.F, self.g = [None], [None]
        B, b, C = [eye], [np.zeros(d)], [np.zeros((d, d))]
        for t in range(1, s.T + 1):
            pts = np.vstack([np.zeros(d), eye])
            den = denoiser(target, s, pts, t)
            mean, _ = reverse_transition_params(s, t, pts, den.score)
            g = mean[0]
            F = (mean[1:] - g).T
            self.F.append(F)
            self.g.append(g)
            B.append(B[-1] @ F)
            b.append(B[-2] @ g + b[-1])
            C.append(C[-1] + s.step_var(t) * B[-2] @ B[-2].T)
        self.B, self.b, self.C = B, b, C

    def _obs(self, t):
        M = self.M
        return self.B[t][M], self.b[t][M], self.C[t][np.ix_(M, M)]

    def exact_log_twist(self, X, t: int) -> np.ndarray:
        if t == 0:
            raise ValueError("the observation is a point mass at t = 0")
        H, h, R = self._obs(t)
        r = self.lik.y - (X @ H.T + h)
        f = cho_factor(R)
        logdet = 2.0 * np.sum(np.log(np.diag(f[0])))
        quad = np.einsum("km,km->k", r, cho_solve(f, r.T).T)
        return -0.5 * (quad + logdet + len(self.M) * _LOG_2PI)

    def _gauss_posterior(self, prior_mean, prior_var, t):
        """Combine ``Normal(prior_mean, prior_var I)`` with ``p(y | x^t)``."""
        H, h, R = self._obs(t)
        Rinv = np.linalg.inv(R)
        P = np.eye(self.dim) / prior_var + H.T @ Rinv @ H
        L = np.linalg.cholesky(P)
        rhs = prior_mean / prior_var + (self.lik.y - h) @ Rinv @ H
        mean = cho_solve((L, True), rhs.T).T
        return mean, L

    def initial(self, K: int, seed: int):
        _, var = self.s.prior_params()
        T = self.s.T
        mean, L = self._gauss_posterior(np.zeros((1, self.dim)), var, T)
        z = normals(seed, Stream.INIT, T, (K, self.dim))
        X = mean + np.linalg.solve(L.T, z.T).T
        return X, self.cache(X, T), np.zeros(K)

    def cache(self, X, t: int) -> StepCache:
        if t == 0:
            return StepCache(np.zeros(X.shape[0]), denoiser_at_zero(self.target, X))
        den = denoiser(self.target, self.s, X, t)
        model_mean = X @ self.F[t].T + self.g[t]
        return StepCache(self.exact_log_twist(X, t), den, model_mean, None)

    def propose(self, cache: StepCache, X, t: int, noise, factor: float):
        var = self.s.step_var(t) * factor
        mean, L = self._gauss_posterior(cache.model_mean, var, t - 1)
        x_new = mean + np.linalg.solve(L.T, noise.T).T
        # log Normal(x_new; mean, P^{-1}) with P = L L^T
        z = (x_new - mean) @ L
        logdet_P = 2.0 * np.sum(np.log(np.diag(L)))
        log_prop = -0.5 * (np.einsum("kd,kd->k", z, z) - logdet_P + self.dim * _LOG_2PI)
        return x_new, log_prop


# --- benchmark sweep ---------------------------------------------------------------------------

ROW_COLUMNS = (
    "method", "task", "K", "replicate", "seed", "error", "mse",
    "final_ess", "resample_count", "wall_ms",
)
AGGREGATE_COLUMNS = ("method", "task", "K", "mean_error", "sem2")

TASKS = ("smooth_norm", "inpaint", "inpaint_dof")


def task_likelihood(task: str, y: float = 0.0) -> Likelihood:
    if task == "smooth_norm":
        return SmoothNorm(y)
    if task == "inpaint":
        return Inpaint((0,), [y])
    if task == "inpaint_dof":
        return InpaintDOF(((0,), (1,)), [y])
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def row_seed(seed: int, method: str, task: str, K: int, replicate: int) -> int:
    """``seed`` xor a stable 64-bit hash of the row key."""
    key = f"{method}|{task}|{K}|{replicate}".encode()
    h = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
    return (int(seed) ^ h) & ((1 << 64) - 1)


@dataclass(frozen=True)
class BenchmarkSpec:
    target: AnalyticTarget
    schedule: NoiseSchedule
    methods: Tuple[str, ...] = ("tds", "guidance")
    tasks: Tuple[str, ...] = TASKS
    Ks: Tuple[int, ...] = (16, 64, 256, 1024, 4096)
    replicates: int = 25
    seed: int = 0
    y: float = 0.0
    twist: TwistConfig = field(default_factory=TwistConfig)
    ess_threshold: float = 0.5
    resampling: Resampling = Resampling.SYSTEMATIC
    grid: GridSpec = field(default_factory=GridSpec)

    def jobs(self):
        for method in self.methods:
            for task in self.tasks:
                try:
                    check_compatible(Method(method), task_likelihood(task, self.y))
                except UnsupportedCombination:
                    continue
                for K in self.Ks:
                    for rep in range(self.replicates):
                        yield method, task, int(K), rep


def _run_row(args):
    spec, method, task, K, rep, oracle_mean, timing = args
    seed = row_seed(spec.seed, method, task, K, rep)
    row = {"method": method, "task": task, "K": K, "replicate": rep, "seed": seed}
    cfg = SamplerConfig(
        method=method, K=K, seed=seed, twist=spec.twist,
        ess_threshold=spec.ess_threshold, resampling=spec.resampling,
    )
    t0 = time.perf_counter()
    try:
        res = run_sampler(cfg, spec.target, task_likelihood(task, spec.y), spec.schedule)
        err = estimation_error(estimate_conditional_mean(res.states, res.weights), oracle_mean)
        row.update(
            error=err, mse=err * err, final_ess=ess(res.weights),
            resample_count=res.diagnostics.resample_count, failure="",
        )
    except Exception as exc:  # recorded per row, the sweep carries on
        row.update(
            error=math.nan, mse=math.nan, final_ess=math.nan,
            resample_count=0, failure=f"{type(exc).__name__}: {exc}",
        )
    row["wall_ms"] = (time.perf_counter() - t0) * 1e3 if timing else 0.0
    return row


def benchmark(spec: BenchmarkSpec, workers: int = 1, timing: bool = True) -> List[dict]:
    """Run the sweep; rows come back sorted by (method, task, K, replicate).

    Each row carries an extra ``failure`` field (empty on success).  With
    ``timing=False`` wall times are zeroed so outputs are byte-comparable.
    """
    oracles: Dict[str, np.ndarray] = {
        task: conditional_mean_oracle(spec.target, task_likelihood(task, spec.y),
                                      spec.twist.twist_scale, spec.grid)
        for task in spec.tasks
    }
    args = [(spec, m, task, K, r, oracles[task], timing) for m, task, K, r in spec.jobs()]
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_row, args, chunksize=max(1, len(args) // (8 * workers))))
    else:
        rows = [_run_row(a) for a in args]
    order = {m: i for i, m in enumerate(spec.methods)}
    rows.sort(key=lambda r: (order[r["method"]], r["task"], r["K"], r["replicate"]))
    return rows


def _groups(rows):
    out: Dict[tuple, list] = {}
    for r in rows:
        out.setdefault((r["method"], r["task"], r["K"]), []).append(r)
    return out


def aggregate(rows: Sequence[dict]) -> List[dict]:
    """Mean error and two standard errors per (method, task, K)."""
    agg = []
    for (m, task, K), grp in _groups(rows).items():
        e = np.array([r["error"] for r in grp if np.isfinite(r["error"])])
        if e.size == 0:
            mean, sem2 = math.nan, math.nan
        else:
            mean = float(e.mean())
            sem2 = float(2.0 * e.std(ddof=1) / np.sqrt(e.size)) if e.size > 1 else math.nan
        agg.append({"method": m, "task": task, "K": K, "mean_error": mean, "sem2": sem2})
    return agg


def mse_by_K(rows: Sequence[dict], method: str, task: str) -> List[Tuple[int, float]]:
    out = []
    for (m, t, K), grp in sorted(_groups(rows).items(), key=lambda kv: kv[0][2]):
        if m == method and t == task:
            mse = [r["mse"] for r in grp if np.isfinite(r["mse"])]
            if mse:
                out.append((K, float(np.mean(mse))))
    return out


def slope(rows: Sequence[dict], method: str, task: str) -> float:
    return fit_loglog_slope(mse_by_K(rows, method, task))
