"""Likelihoods and tractable twisting functions.

A twisting function approximates ``log p(y | x^t)`` by evaluating the
likelihood at the denoised estimate ``x_hat(x^t)``.  Every evaluation here is
vectorized over a ``(K, d)`` batch and consumes a single
:class:`~tdsampler.score_model.DenoiserOutput`, so mask sums never trigger
extra denoiser calls.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalFailure, UnsupportedCombination
from .schedule import NoiseSchedule, forward_marginal_params, reverse_transition_params
from .score_model import AnalyticTarget, DenoiserOutput, _as_batch, denoiser

_LOG_2PI = np.log(2.0 * np.pi)
DPS_VARIANCE_FLOOR = 1e-8


# --- likelihoods ---------------------------------------------------------------


@dataclass(frozen=True)
class SmoothNorm:
    """Laplace observation of the Euclidean norm: ``exp(-| |x| - y |) / 2``."""

    y: float = 0.0

    def validate(self, d: int) -> None:
        if not np.isfinite(self.y):
            raise ValueError("y must be finite")


def _freeze_mask(mask, d: Optional[int] = None) -> tuple:
    m = tuple(int(i) for i in np.atleast_1d(mask))
    if len(m) == 0:
        raise ValueError("mask must be nonempty")
    if len(set(m)) != len(m):
        raise ValueError(f"mask indices must be distinct: {m}")
    if d is not None and any(i < 0 or i >= d for i in m):
        raise ValueError(f"mask {m} out of range for dimension {d}")
    return m


@dataclass(frozen=True)
class Inpaint:
    """Exact observation ``x0[mask] = y``."""

    mask: tuple
    y: np.ndarray = field(compare=False)

    def __post_init__(self):
        object.__setattr__(self, "mask", _freeze_mask(self.mask))
        y = np.atleast_1d(np.asarray(self.y, dtype=float)).copy()
        if y.shape != (len(self.mask),):
            raise ValueError("y must have one entry per masked coordinate")
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    def validate(self, d: int) -> None:
        _freeze_mask(self.mask, d)

    def __eq__(self, other):
        return (
            isinstance(other, Inpaint)
            and self.mask == other.mask
            and np.array_equal(self.y, other.y)
        )

    __hash__ = None


@dataclass(frozen=True)
class InpaintDOF:
    """Observation ``y`` located at one of several masks, uniformly at random."""

    mask_set: tuple
    y: np.ndarray = field(compare=False)

    def __post_init__(self):
        masks = tuple(_freeze_mask(m) for m in self.mask_set)
        if not masks:
            raise ValueError("mask_set must be nonempty")
        y = np.atleast_1d(np.asarray(self.y, dtype=float)).copy()
        if any(len(m) != y.size for m in masks):
            raise ValueError("every mask must have the same cardinality as y")
        y.setflags(write=False)
        object.__setattr__(self, "mask_set", masks)
        object.__setattr__(self, "y", y)

    def validate(self, d: int) -> None:
        for m in self.mask_set:
            _freeze_mask(m, d)

    def __eq__(self, other):
        return (
            isinstance(other, InpaintDOF)
            and self.mask_set == other.mask_set
            and np.array_equal(self.y, other.y)
        )

    __hash__ = None


@dataclass(frozen=True)
class Flat:
    """Constant likelihood; conditioning on nothing."""

    def validate(self, d: int) -> None:
        pass


Likelihood = Union[SmoothNorm, Inpaint, InpaintDOF, Flat]


def log_likelihood(lik: Likelihood, x0) -> np.ndarray:
    """Exact ``log p(y | x0)`` for the smooth likelihoods (delta ones are not densities)."""
    X, single = _as_batch(x0)
    if isinstance(lik, SmoothNorm):
        out = -np.abs(np.linalg.norm(X, axis=1) - lik.y) - np.log(2.0)
    elif isinstance(lik, Flat):
        out = np.zeros(X.shape[0])
    else:
        raise UnsupportedCombination("inpainting likelihoods are point masses")
    return out[0] if single else out


# --- twist configuration ---------------------------------------------------------


class VarianceScheme(str, enum.Enum):
    TDS_SCALING = "tds_scaling"
    DPS = "dps"
    PIGDM = "pigdm"
    FORWARD_VAR = "forward_var"
    NOISE_LEVEL = "noise_level"


class FinalStep(str, enum.Enum):
    HEURISTIC = "heuristic"
    EXACT = "exact"


@dataclass(frozen=True)
class TwistConfig:
    """Twist scale, inpainting variance scheme and final-step handling.

    ``data_var`` is the population variance used by ``TDS_SCALING``; ``None``
    means "take it from the target" (see :meth:`resolved`).
    """

    twist_scale: float = 1.0
    variance_scheme: VarianceScheme = VarianceScheme.TDS_SCALING
    data_var: Optional[float] = None
    final_step: FinalStep = FinalStep.EXACT

    def __post_init__(self):
        object.__setattr__(self, "variance_scheme", VarianceScheme(self.variance_scheme))
        object.__setattr__(self, "final_step", FinalStep(self.final_step))
        if not (np.isfinite(self.twist_scale) and self.twist_scale >= 0):
            raise ValueError("twist_scale must be >= 0")
        if self.data_var is not None and not self.data_var > 0:
            raise ValueError("data_var must be positive")

    def resolved(self, target: AnalyticTarget) -> "TwistConfig":
        if self.data_var is not None:
            return self
        return replace(self, data_var=target.mean_marginal_variance())


# --- variance schemes ---------------------------------------------------------------


def _heuristic_final_var(s: NoiseSchedule) -> float:
    return s.step_var(1)


def twist_variance(
    cfg: TwistConfig,
    s: NoiseSchedule,
    t: int,
    den: Optional[DenoiserOutput] = None,
    y=None,
    mask=None,
):
    """Variance of the Gaussian inpainting twist at step ``t``.

    Returns a float, or a ``(K,)`` array for the data-dependent DPS scheme.
    At ``t = 0`` every scheme uses the small heuristic variance ``sigma_1^2``.
    """
    if t == 0:
        return _heuristic_final_var(s)
    scale, var = forward_marginal_params(s, t)
    scheme = cfg.variance_scheme
    if scheme is VarianceScheme.FORWARD_VAR:
        return var
    if scheme is VarianceScheme.NOISE_LEVEL:
        # noise level of x^t / scale, i.e. the VE-equivalent variance
        return var / (scale * scale)
    if scheme is VarianceScheme.TDS_SCALING:
        if cfg.data_var is None:
            raise ValueError("TDS_SCALING needs data_var; call TwistConfig.resolved(target)")
        tilde = var / (scale * scale)
        return tilde * cfg.data_var / (tilde + cfg.data_var)
    if scheme is VarianceScheme.PIGDM:
        return s.step_var(t) / scale
    # DPS
    if den is None or y is None or mask is None:
        raise ValueError("DPS variance depends on the denoiser output, y and mask")
    X, single = _as_batch(den.x_hat)
    rho = np.linalg.norm(X[:, list(mask)] - np.asarray(y), axis=1)
    v = np.maximum(2.0 * rho * s.step_var(t), DPS_VARIANCE_FLOOR)
    return v[0] if single else v


def _gauss_mask_terms(x_hat, y, mask, cfg, s, t):
    """``log Normal(y; x_hat[mask], v)`` and its gradient in ``x_hat``."""
    K, d = x_hat.shape
    m = len(mask)
    r = x_hat[:, list(mask)] - y
    rho2 = np.einsum("km,km->k", r, r)
    grad = np.zeros((K, d))
    hits = 0
    if cfg.variance_scheme is VarianceScheme.DPS and t > 0:
        sv = s.step_var(t)
        rho = np.sqrt(rho2)
        raw = 2.0 * rho * sv
        clamped = raw < DPS_VARIANCE_FLOOR
        hits = int(np.count_nonzero(clamped))
        v = np.where(clamped, DPS_VARIANCE_FLOOR, raw)
        val = -0.5 * m * (_LOG_2PI + np.log(v)) - 0.5 * rho2 / v
        # d val / d rho through v = 2 rho sv (zero where clamped)
        dv = np.where(clamped, 0.0, 2.0 * sv)
        dval_drho = (-0.5 * m / v + 0.5 * rho2 / (v * v)) * dv
        with np.errstate(invalid="ignore", divide="ignore"):
            radial = np.where(rho > 0, dval_drho / rho, 0.0)
        g = -r / v[:, None] + radial[:, None] * r
    else:
        v = twist_variance(cfg, s, t)
        val = -0.5 * m * (_LOG_2PI + np.log(v)) - 0.5 * rho2 / v
        g = -r / v
    grad[:, list(mask)] = g
    return val, grad, hits


def _twist_terms(lik: Likelihood, cfg: TwistConfig, x_hat, s: NoiseSchedule, t: int):
    """Unscaled twist log-value, its gradient in ``x_hat``, and DPS floor hits."""
    if not np.all(np.isfinite(x_hat)):
        bad = np.argwhere(~np.all(np.isfinite(x_hat), axis=1))[:, 0]
        raise NumericalFailure(
            f"non-finite denoiser output at step {t} for particle(s) {bad[:5].tolist()}"
        )
    K, d = x_hat.shape
    if isinstance(lik, Flat):
        return np.zeros(K), np.zeros((K, d)), 0
    if isinstance(lik, SmoothNorm):
        n = np.linalg.norm(x_hat, axis=1)
        val = -np.abs(n - lik.y) - np.log(2.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(n[:, None] > 0, x_hat / n[:, None], 0.0)
        return val, -np.sign(n - lik.y)[:, None] * unit, 0
    if isinstance(lik, Inpaint):
        return _gauss_mask_terms(x_hat, lik.y, lik.mask, cfg, s, t)
    if isinstance(lik, InpaintDOF):
        vals, grads, hits = [], [], 0
        for mask in lik.mask_set:
            v_, g_, h_ = _gauss_mask_terms(x_hat, lik.y, mask, cfg, s, t)
            vals.append(v_)
            grads.append(g_)
            hits += h_
        vals = np.stack(vals)  # (M, K)
        lse = logsumexp(vals, axis=0)
        resp = np.exp(vals - lse)
        grad = np.einsum("mk,mkd->kd", resp, np.stack(grads))
        return lse - np.log(len(lik.mask_set)), grad, hits
    raise TypeError(f"unknown likelihood {lik!r}")


@dataclass
class TwistEval:
    log_value: np.ndarray
    grad_x: Optional[np.ndarray]
    floor_hits: int = 0


def evaluate_twist(
    lik: Likelihood,
    cfg: TwistConfig,
    den: DenoiserOutput,
    s: NoiseSchedule,
    t: int,
    with_grad: bool = True,
) -> TwistEval:
    """Twist log-values and x-gradients for a batch, from one denoiser output."""
    X, _ = _as_batch(den.x_hat)
    val, g_hat, hits = _twist_terms(lik, cfg, X, s, t)
    gamma = cfg.twist_scale
    grad = None
    if with_grad:
        J = np.asarray(den.jacobian)
        if J.ndim == 2:
            J = J[None]
        grad = gamma * np.einsum("kij,ki->kj", J, g_hat)
    return TwistEval(gamma * val, grad, hits)


def twist_log(lik: Likelihood, cfg: TwistConfig, den: DenoiserOutput, s: NoiseSchedule, t: int):
    """``gamma * log p_tilde(y | x^t)`` evaluated at ``den.x_hat``."""
    single = np.asarray(den.x_hat).ndim == 1
    out = evaluate_twist(lik, cfg, den, s, t, with_grad=False).log_value
    return float(out[0]) if single else out


def twist_grad(lik, cfg, target: AnalyticTarget, s: NoiseSchedule, x, t: int):
    """Exact gradient of :func:`twist_log` in ``x^t`` (chain rule through the denoiser)."""
    single = np.asarray(x).ndim == 1
    den = denoiser(target, s, x, t)
    g = evaluate_twist(lik, cfg, den, s, t).grad_x
    return g[0] if single else g


def conditional_score(target, lik, cfg, s: NoiseSchedule, x, t: int):
    """Unconditional score plus twist gradient."""
    single = np.asarray(x).ndim == 1
    den = denoiser(target, s, x, t)
    tw = evaluate_twist(lik, cfg, den, s, t)
    out = np.atleast_2d(den.score) + tw.grad_x
    return out[0] if single else out


# --- exact final step ----------------------------------------------------------------------


def exact_final_proposal(
    lik: Likelihood,
    target: AnalyticTarget,
    s: NoiseSchedule,
    x1,
    rng: np.random.Generator,
    den: Optional[DenoiserOutput] = None,
    noise=None,
):
    """Final move that pins the observed coordinates to ``y``.

    The unobserved coordinates are drawn from the unconditional model
    transition ``p(x0 | x1)``.  For mask sets, the mask is chosen with
    probability proportional to ``p(x0[M] = y | x1)``.

    Returns ``(x0, log_pred)`` where ``log_pred`` is the log of the proposal's
    mass, ``log(mean_M p(x0[M] = y | x1))``.  The importance weight that keeps
    the final target exact is ``exp(log_pred - twist_log_at_x1)``.
    """
    if not isinstance(lik, (Inpaint, InpaintDOF)):
        raise UnsupportedCombination(
            f"exact final step only applies to inpainting likelihoods, not {type(lik).__name__}"
        )
    X1, single = _as_batch(x1)
    if den is None:
        den = denoiser(target, s, X1, 1)
    mean, var = reverse_transition_params(s, 1, X1, np.atleast_2d(den.score))
    if noise is None:
        noise = rng.standard_normal(X1.shape)
    x0 = mean + np.sqrt(var) * noise
    masks = [lik.mask] if isinstance(lik, Inpaint) else list(lik.mask_set)
    m = lik.y.size
    logp = np.stack(
        [
            -0.5 * m * (_LOG_2PI + np.log(var))
            - 0.5 * np.sum((mean[:, list(M)] - lik.y) ** 2, axis=1) / var
            for M in masks
        ]
    )  # (n_masks, K)
    lse = logsumexp(logp, axis=0)
    if len(masks) == 1:
        choice = np.zeros(X1.shape[0], dtype=int)
    else:
        probs = np.exp(logp - lse)
        u = rng.random(X1.shape[0])
        choice = np.minimum((np.cumsum(probs, axis=0) < u).sum(axis=0), len(masks) - 1)
    for j, M in enumerate(masks):
        rows = choice == j
        x0[np.ix_(rows, list(M))] = lik.y
    log_pred = lse - np.log(len(masks))
    if single:
        return x0[0], float(log_pred[0])
    return x0, log_pred


def mask_responsibilities(lik: InpaintDOF, s: NoiseSchedule, mean_x0) -> np.ndarray:
    """Normalized ``p(x0[M] = y | x1)`` over masks, given the model mean of ``x0``."""
    var = s.step_var(1)
    X, _ = _as_batch(mean_x0)
    logp = np.stack(
        [-0.5 * np.sum((X[:, list(M)] - lik.y) ** 2, axis=1) / var for M in lik.mask_set]
    )
    return np.exp(logp - logsumexp(logp, axis=0))
