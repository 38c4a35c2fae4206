"""Particle engine: ESS, resampling and the six conditional samplers.

Samplers run the reverse chain from ``t = T`` down to ``t = 0``.  A
:class:`TwistedKernel` supplies, for a batch of states at step ``t``, the
twist values and the means of the model and proposal transitions to
``t - 1``; :func:`tds_step` turns that into propose/weight/resample.  Swapping
the kernel (see :mod:`tdsampler.oracle` for the exact linear-Gaussian one)
reuses the same weighting code.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional

import numpy as np

from . import kernels
from .errors import DegenerateEnsemble, NumericalFailure, UnsupportedCombination
from .rng import Stream, generator, normals
from .schedule import (
    NoiseSchedule,
    forward_marginal_params,
    forward_step_params,
    reverse_transition_params,
)
from .score_model import AnalyticTarget, DenoiserOutput, denoiser, denoiser_at_zero
from .twisting import (
    Flat,
    FinalStep,
    Inpaint,
    InpaintDOF,
    Likelihood,
    SmoothNorm,
    TwistConfig,
    evaluate_twist,
    exact_final_proposal,
)

_LOG_2PI = np.log(2.0 * np.pi)


class Method(str, enum.Enum):
    TDS = "tds"
    TDS_IS = "tds_is"
    GUIDANCE = "guidance"
    NAIVE_IS = "naive_is"
    REPLACEMENT = "replacement"
    SMC_DIFF = "smc_diff"


class Resampling(str, enum.Enum):
    MULTINOMIAL = "multinomial"
    SYSTEMATIC = "systematic"


class ProposalVar(str, enum.Enum):
    MODEL_VAR = "model_var"
    INFLATED = "inflated"


@dataclass(frozen=True)
class SamplerConfig:
    method: Method = Method.TDS
    K: int = 64
    resampling: Resampling = Resampling.SYSTEMATIC
    ess_threshold: float = 0.5
    proposal_var_mode: ProposalVar = ProposalVar.MODEL_VAR
    inflation: float = 1.0
    truncate_at: Optional[int] = None
    seed: int = 0
    twist: TwistConfig = field(default_factory=TwistConfig)

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "resampling", Resampling(self.resampling))
        object.__setattr__(self, "proposal_var_mode", ProposalVar(self.proposal_var_mode))
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")
        if not 0.0 <= self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must lie in [0, 1]")
        if self.proposal_var_mode is ProposalVar.INFLATED and not self.inflation > 1.0:
            raise ValueError("INFLATED proposal variance needs inflation > 1")
        if self.truncate_at is not None and self.truncate_at < 0:
            raise ValueError("truncate_at must be >= 0")

    @property
    def variance_factor(self) -> float:
        return self.inflation if self.proposal_var_mode is ProposalVar.INFLATED else 1.0


# --- weights and resampling -------------------------------------------------


def normalize_log_weights(log_w) -> np.ndarray:
    log_w = np.ascontiguousarray(log_w, dtype=float)
    if log_w.size == 0 or not np.any(np.isfinite(log_w)) or np.any(np.isnan(log_w)):
        raise DegenerateEnsemble("all particle weights are zero or undefined")
    return kernels.log_normalize(log_w)[0]


def ess(weights) -> float:
    """``(sum w)^2 / sum w^2`` for nonnegative weights (normalization optional)."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0 or not np.all(np.isfinite(w)) or np.any(w < 0) or not w.sum() > 0:
        raise DegenerateEnsemble("weights must be finite, nonnegative and not all zero")
    with np.errstate(divide="ignore"):
        return ess_from_log_weights(np.log(w))


def ess_from_log_weights(log_w) -> float:
    log_w = np.ascontiguousarray(log_w, dtype=float)
    if not np.any(np.isfinite(log_w)) or np.any(np.isnan(log_w)):
        raise DegenerateEnsemble("all particle weights are zero or undefined")
    return float(kernels.ess_from_log_weights(log_w))


def resample_systematic(weights, K: int, u: float) -> np.ndarray:
    """Systematic resampling on the grid ``(u + i) / K``; lower index wins ties.

    ``u`` must lie strictly inside ``(0, 1)``: with ``u = 0`` the first grid
    point sits on the left edge of every cumulative interval and the count
    bounds no longer hold.
    """
    if not 0.0 < u < 1.0:
        raise ValueError("u must lie in the open interval (0, 1)")
    w = np.ascontiguousarray(weights, dtype=float)
    if w.size != K:
        raise ValueError("len(weights) must equal K")
    return kernels.systematic_ancestors(w, float(u))


def resample_multinomial(weights, K: int, rng: np.random.Generator) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    cum = np.cumsum(w)
    cum /= cum[-1]
    idx = np.searchsorted(cum, rng.random(K), side="right")
    return np.minimum(idx, w.size - 1).astype(np.int64)


def estimate_conditional_mean(states, weights) -> np.ndarray:
    """Weighted particle mean ``sum_k w_k x_k``."""
    X = np.atleast_2d(np.asarray(states, dtype=float))
    w = np.asarray(weights, dtype=float)
    return w @ X


# --- kernels -------------------------------------------------------------------


@dataclass
class StepCache:
    """Per-particle quantities at the current step ``t``.

    ``model_mean`` / ``prop_mean`` parametrize the transitions to ``t - 1``;
    both are ``None`` at ``t = 0``.
    """

    twist: np.ndarray
    den: DenoiserOutput
    model_mean: Optional[np.ndarray] = None
    prop_mean: Optional[np.ndarray] = None
    floor_hits: int = 0

    def take(self, idx) -> "StepCache":
        J = np.asarray(self.den.jacobian)
        den = DenoiserOutput(
            self.den.x_hat[idx],
            J[idx] if J.ndim == 3 else J,
            None if self.den.score is None else self.den.score[idx],
        )
        pick = lambda a: None if a is None else a[idx]  # noqa: E731
        return StepCache(self.twist[idx], den, pick(self.model_mean), pick(self.prop_mean))


class TwistedKernel:
    """Model transitions from an analytic target, optionally twisted.

    ``conditional=False`` gives the unconditional proposal; twist values are
    then only evaluated where ``twist_every_step`` asks for them (always at
    ``t = 0``).
    """

    def __init__(
        self,
        target: AnalyticTarget,
        lik: Likelihood,
        twist: TwistConfig,
        s: NoiseSchedule,
        conditional: bool = True,
        twist_every_step: bool = True,
    ):
        lik.validate(target.dim)
        self.target = target
        self.lik = lik
        self.twist_cfg = twist.resolved(target)
        self.s = s
        self.conditional = conditional
        self.twist_every_step = twist_every_step

    @property
    def dim(self) -> int:
        return self.target.dim

    def initial(self, K: int, seed: int):
        """Draws from the reference distribution and their initial log-weights."""
        _, var = self.s.prior_params()
        X = np.sqrt(var) * normals(seed, Stream.INIT, self.s.T, (K, self.dim))
        cache = self.cache(X, self.s.T)
        return X, cache, cache.twist.copy()

    def cache(self, X, t: int) -> StepCache:
        K = X.shape[0]
        if t == 0:
            den = denoiser_at_zero(self.target, X)
            tw = evaluate_twist(self.lik, self.twist_cfg, den, self.s, 0, with_grad=False)
            return StepCache(tw.log_value, den, floor_hits=tw.floor_hits)
        den = denoiser(self.target, self.s, X, t)
        if self.conditional or self.twist_every_step:
            tw = evaluate_twist(self.lik, self.twist_cfg, den, self.s, t, with_grad=self.conditional)
            log_tw, hits = tw.log_value, tw.floor_hits
        else:
            tw, log_tw, hits = None, np.zeros(K), 0
        model_mean, _ = reverse_transition_params(self.s, t, X, den.score)
        if self.conditional:
            prop_mean, _ = reverse_transition_params(self.s, t, X, den.score + tw.grad_x)
        else:
            prop_mean = model_mean
        return StepCache(log_tw, den, model_mean, prop_mean, hits)

    def propose(self, cache: StepCache, X, t: int, noise, factor: float):
        """Draw ``x^{t-1}``; returns it with the proposal log-density."""
        pv = self.s.step_var(t) * factor
        x_new = cache.prop_mean + np.sqrt(pv) * noise
        return x_new, _iso_logpdf(x_new, cache.prop_mean, pv)


def _iso_logpdf(x, mean, var):
    d = x.shape[1]
    r = x - mean
    return -0.5 * (d * (_LOG_2PI + np.log(var)) + np.einsum("kd,kd->k", r, r) / var)


# --- ensemble and diagnostics ----------------------------------------------------


@dataclass
class Diagnostics:
    steps: List[int] = field(default_factory=list)
    ess: List[float] = field(default_factory=list)
    resampled: List[bool] = field(default_factory=list)
    max_abs_log_incr_weight: List[float] = field(default_factory=list)
    incr_spread: List[float] = field(default_factory=list)
    increments: Optional[List[np.ndarray]] = None
    dps_floor_events: int = 0
    # assumption monitors (see README, "Diagnostics")
    final_twist_exact: bool = False
    twists_finite: bool = True
    weights_bounded: bool = True
    proposal_var_inflated: bool = False

    @property
    def resample_count(self) -> int:
        return int(sum(self.resampled))

    @property
    def running_max_abs_log_incr_weight(self) -> float:
        return max(self.max_abs_log_incr_weight, default=0.0)

    def record(self, t, ess_value, resampled, incr, keep_increments=False):
        self.steps.append(int(t))
        self.ess.append(float(ess_value))
        self.resampled.append(bool(resampled))
        if incr is None:
            self.max_abs_log_incr_weight.append(0.0)
            self.incr_spread.append(0.0)
        else:
            self.max_abs_log_incr_weight.append(float(np.max(np.abs(incr))))
            self.incr_spread.append(float(np.max(incr) - np.min(incr)))
            if keep_increments:
                if self.increments is None:
                    self.increments = []
                self.increments.append(np.array(incr))

    def rows(self):
        return list(zip(self.steps, self.ess, self.resampled, self.max_abs_log_incr_weight))


@dataclass
class ParticleEnsemble:
    states: np.ndarray
    log_weights: np.ndarray
    t: int
    cache: StepCache
    diagnostics: Diagnostics = field(default_factory=Diagnostics)

    @property
    def K(self) -> int:
        return self.states.shape[0]

    def normalized_weights(self) -> np.ndarray:
        return normalize_log_weights(self.log_weights)

    def ess(self) -> float:
        return ess_from_log_weights(self.log_weights)


class SamplerResult(NamedTuple):
    states: np.ndarray
    weights: np.ndarray
    diagnostics: Diagnostics


_RESAMPLES = {Method.TDS, Method.SMC_DIFF}
_WEIGHTED = {Method.TDS, Method.TDS_IS, Method.SMC_DIFF}
_TWISTED = {Method.TDS, Method.TDS_IS, Method.GUIDANCE}


def _maybe_resample(ens: ParticleEnsemble, cfg: SamplerConfig, step: int) -> bool:
    if cfg.method not in _RESAMPLES or cfg.ess_threshold <= 0.0:
        return False
    K = ens.K
    if cfg.ess_threshold < 1.0 and ens.ess() >= cfg.ess_threshold * K:
        return False
    w = ens.normalized_weights()
    rng = generator(cfg.seed, Stream.RESAMPLE, step)
    if cfg.resampling is Resampling.SYSTEMATIC:
        u = rng.random()
        while u == 0.0:
            u = rng.random()
        idx = resample_systematic(w, K, u)
    else:
        idx = resample_multinomial(w, K, rng)
    ens.states = ens.states[idx]
    ens.cache = ens.cache.take(idx)
    ens.log_weights = np.zeros(K)
    return True


def _check_increments(incr, t):
    bad = ~np.isfinite(incr)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise NumericalFailure(
            f"non-finite incremental weight {incr[k]!r} for particle {k} at step {t}"
        )


def tds_step(
    ens: ParticleEnsemble,
    kernel: TwistedKernel,
    cfg: SamplerConfig,
    keep_increments: bool = False,
) -> ParticleEnsemble:
    """Advance a twisted ensemble from step ``t + 1`` to ``t`` (in place)."""
    t_next = ens.t
    t = t_next - 1
    if t < 0:
        raise ValueError("ensemble is already at t = 0")
    diag = ens.diagnostics
    resampled = _maybe_resample(ens, cfg, t)
    prev = ens.cache
    noise = normals(cfg.seed, Stream.PROPOSAL, t, ens.states.shape)
    s = kernel.s
    var = s.step_var(t_next)
    lik = kernel.lik
    exact_final = (
        t == 0
        and kernel.conditional
        and isinstance(lik, (Inpaint, InpaintDOF))
        and kernel.twist_cfg.final_step is FinalStep.EXACT
    )
    if exact_final:
        rng = generator(cfg.seed, Stream.FINAL, 0)
        x_new, log_pred = exact_final_proposal(
            lik, kernel.target, s, ens.states, rng, den=prev.den, noise=noise
        )
        incr = log_pred - prev.twist
        cache = kernel.cache(x_new, 0)
        diag.final_twist_exact = True
    else:
        x_new, log_prop = kernel.propose(prev, ens.states, t_next, noise, cfg.variance_factor)
        cache = kernel.cache(x_new, t)
        incr = _iso_logpdf(x_new, prev.model_mean, var) + cache.twist - log_prop - prev.twist
        if t == 0 and isinstance(lik, (SmoothNorm, Flat)):
            diag.final_twist_exact = True
    diag.dps_floor_events += cache.floor_hits
    if not np.all(np.isfinite(cache.twist)):
        diag.twists_finite = False
    _check_increments(incr, t)
    if cfg.method in _WEIGHTED:
        ens.log_weights = ens.log_weights + incr
    ens.states = x_new
    ens.cache = cache
    ens.t = t
    diag.record(t, ens.ess(), resampled, incr, keep_increments)
    return ens


# --- replacement-style samplers ------------------------------------------------------


def _observation_path(s: NoiseSchedule, y, seed: int) -> list:
    """A forward-noised copy of ``y`` for every step (shared by all particles)."""
    path = [np.asarray(y, dtype=float)]
    for t in range(1, s.T + 1):
        a, v = forward_step_params(s, t)
        eps = normals(seed, Stream.OBSERVATION, t, path[-1].shape)
        path.append(a * path[-1] + np.sqrt(v) * eps)
    return path


def _run_replacement(cfg: SamplerConfig, target, lik: Inpaint, s: NoiseSchedule):
    K, d = cfg.K, target.dim
    M = list(lik.mask)
    smc = cfg.method is Method.SMC_DIFF
    diag = Diagnostics()
    path = _observation_path(s, lik.y, cfg.seed) if smc else None

    def observed(t):
        if t == 0:
            return np.broadcast_to(lik.y, (K, len(M)))
        if smc:
            return np.broadcast_to(path[t], (K, len(M)))
        a, v = forward_marginal_params(s, t)
        eps = normals(cfg.seed, Stream.OBSERVATION, t, (K, len(M)))
        return a * lik.y + np.sqrt(v) * eps

    _, pvar = s.prior_params()
    X = np.sqrt(pvar) * normals(cfg.seed, Stream.INIT, s.T, (K, d))
    X[:, M] = observed(s.T)
    dummy = StepCache(np.zeros(K), DenoiserOutput(X, np.eye(d)))
    ens = ParticleEnsemble(X, np.zeros(K), s.T, dummy, diag)
    for t in range(s.T - 1, -1, -1):
        resampled = _maybe_resample(ens, cfg, t)
        X = ens.states
        den = denoiser(target, s, X, t + 1)
        mean, var = reverse_transition_params(s, t + 1, X, den.score)
        noise = normals(cfg.seed, Stream.PROPOSAL, t, X.shape)
        x_new = mean + np.sqrt(var) * noise
        obs = observed(t)
        x_new[:, M] = obs
        incr = None
        if smc:
            # p(x^t_M | x^{t+1}) up to the particle-independent proposal density
            r = obs - mean[:, M]
            incr = -0.5 * (len(M) * (_LOG_2PI + np.log(var)) + np.sum(r * r, axis=1) / var)
            _check_increments(incr, t)
            ens.log_weights = ens.log_weights + incr
        ens.states = x_new
        ens.t = t
        diag.record(t, ens.ess(), resampled, incr)
    diag.final_twist_exact = True
    return SamplerResult(ens.states, ens.normalized_weights(), diag)


# --- driver ---------------------------------------------------------------------------


def check_compatible(method: Method, lik: Likelihood) -> None:
    method = Method(method)
    if method in (Method.REPLACEMENT, Method.SMC_DIFF) and not isinstance(lik, Inpaint):
        raise UnsupportedCombination(
            f"{method.value} requires an inpaint likelihood, got {type(lik).__name__}"
        )


def make_kernel(cfg: SamplerConfig, target, lik, s) -> TwistedKernel:
    if cfg.method in _TWISTED:
        return TwistedKernel(target, lik, cfg.twist, s, conditional=True)
    return TwistedKernel(target, lik, cfg.twist, s, conditional=False, twist_every_step=False)


def run_sampler(
    cfg: SamplerConfig,
    target: AnalyticTarget,
    lik: Likelihood,
    s: NoiseSchedule,
    kernel: Optional[TwistedKernel] = None,
    keep_increments: bool = False,
) -> SamplerResult:
    """Run one sampler end to end.

    Returns final states (or denoised states ``x_hat(x^{t*})`` when
    ``truncate_at = t*``), normalized weights and per-step diagnostics.
    """
    check_compatible(cfg.method, lik)
    if cfg.truncate_at is not None and cfg.truncate_at > s.T:
        raise ValueError(f"truncate_at={cfg.truncate_at} exceeds T={s.T}")
    if cfg.method in (Method.REPLACEMENT, Method.SMC_DIFF):
        return _run_replacement(cfg, target, lik, s)
    if kernel is None:
        kernel = make_kernel(cfg, target, lik, s)
    X, cache, log_w0 = kernel.initial(cfg.K, cfg.seed)
    weighted = cfg.method in (Method.TDS, Method.TDS_IS)
    log_w = log_w0 if weighted else np.zeros(cfg.K)
    diag = Diagnostics(proposal_var_inflated=cfg.variance_factor > 1.0)
    ens = ParticleEnsemble(X, np.array(log_w, dtype=float), s.T, cache, diag)
    stop = cfg.truncate_at or 0
    while ens.t > stop:
        tds_step(ens, kernel, cfg, keep_increments)
    if cfg.method is Method.NAIVE_IS:
        # unconditional path; the whole weight is the final twist
        ens.log_weights = np.array(ens.cache.twist, dtype=float)
        diag.final_twist_exact = isinstance(lik, (SmoothNorm, Flat))
    if not np.all(np.isfinite(ens.log_weights)):
        diag.weights_bounded = False
    weights = ens.normalized_weights()
    states = ens.states if stop == 0 else ens.cache.den.x_hat
    return SamplerResult(np.array(states), weights, diag)

