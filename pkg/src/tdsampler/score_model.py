"""Analytic data distributions with exact scores and denoisers.

These stand in for a trained network: for a Gaussian or isotropic Gaussian
mixture ``q(x0)``, the noised marginal ``q(x^t)`` is available in closed form,
and so are its score, the posterior mean ``E[x0 | x^t]`` and that mean's
Jacobian.  All functions accept a single ``(d,)`` point or a ``(K, d)`` batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from . import kernels
from .schedule import NoiseSchedule, forward_marginal_params

_LOG_2PI = np.log(2.0 * np.pi)


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ValueError(f"expected (d,) or (K, d) array, got shape {x.shape}")
    return x, False


@dataclass(frozen=True)
class DenoiserOutput:
    """Posterior mean ``x_hat`` of ``x0`` and its Jacobian ``d x_hat / d x^t``.

    ``score`` is the marginal score at the same point (``None`` at ``t = 0``),
    kept because it falls out of the same computation.
    """

    x_hat: np.ndarray
    jacobian: np.ndarray
    score: Optional[np.ndarray] = None


class AnalyticTarget:
    """Base class; subclasses implement :meth:`posterior`."""

    dim: int

    def posterior(self, x, scale: float, var: float):
        """``(x_hat, jac, score, logpdf)`` for batch ``x`` of shape ``(K, d)``."""
        raise NotImplementedError

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    @property
    def mean(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def covariance(self) -> np.ndarray:
        raise NotImplementedError

    def logpdf(self, x0) -> np.ndarray:
        """Log-density of ``q(x0)`` for a ``(K, d)`` batch."""
        raise NotImplementedError

    def mean_marginal_variance(self) -> float:
        """Average per-coordinate variance of ``q(x0)``."""
        return float(np.mean(np.diag(self.covariance)))


class GaussianTarget(AnalyticTarget):
    def __init__(self, mean, cov):
        mean = np.asarray(mean, dtype=float).reshape(-1)
        cov = np.asarray(cov, dtype=float)
        d = mean.size
        if cov.shape != (d, d):
            raise ValueError(f"cov must be {d}x{d}, got {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
            raise ValueError("cov must be symmetric")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("cov must be positive definite") from None
        self._mean = mean
        self.cov = cov
        self.dim = d

    def __repr__(self):
        return f"GaussianTarget(mean={self._mean.tolist()}, cov={self.cov.tolist()})"

    @property
    def mean(self):
        return self._mean.copy()

    @property
    def covariance(self):
        return self.cov.copy()

    def posterior(self, x, scale, var):
        d = self.dim
        A = scale * scale * self.cov + var * np.eye(d)
        factor = cho_factor(A, lower=True)
        resid = x - scale * self._mean
        Ainv_r = cho_solve(factor, resid.T).T
        gain = scale * self.cov @ cho_solve(factor, np.eye(d))
        x_hat = self._mean + Ainv_r @ (scale * self.cov).T
        score = -Ainv_r
        logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
        logpdf = -0.5 * (np.einsum("kd,kd->k", resid, Ainv_r) + logdet + d * _LOG_2PI)
        jac = np.broadcast_to(gain, (x.shape[0], d, d)).copy()
        return x_hat, jac, score, logpdf

    def logpdf(self, x0):
        return np.atleast_1d(multivariate_normal(self._mean, self.cov).logpdf(np.atleast_2d(x0)))

    def sample(self, n, rng):
        L = np.linalg.cholesky(self.cov)
        return self._mean + rng.standard_normal((n, self.dim)) @ L.T


class GMMTarget(AnalyticTarget):
    """Mixture of isotropic Gaussians sharing one component variance."""

    def __init__(self, weights, means, std: float):
        w = np.asarray(weights, dtype=float).reshape(-1)
        m = np.atleast_2d(np.asarray(means, dtype=float))
        if m.shape[0] != w.size:
            raise ValueError("need one mean per mixture weight")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be positive and sum to 1")
        if not std > 0:
            raise ValueError("component std must be positive")
        self.weights = w
        self.means = m
        self.iso_var = float(std) ** 2
        self.dim = m.shape[1]
        self._log_w = np.log(w)

    def __repr__(self):
        return (
            f"GMMTarget(weights={self.weights.tolist()}, means={self.means.tolist()}, "
            f"std={np.sqrt(self.iso_var)})"
        )

    @property
    def mean(self):
        return self.weights @ self.means

    @property
    def covariance(self):
        mu = self.mean
        dm = self.means - mu
        return self.iso_var * np.eye(self.dim) + (self.weights[:, None] * dm).T @ dm

    def posterior(self, x, scale, var):
        return kernels.gmm_posterior(
            np.ascontiguousarray(x), self.means, self._log_w, self.iso_var, scale, var
        )

    def logpdf(self, x0):
        X = np.atleast_2d(np.asarray(x0, dtype=float))
        sq = ((X[:, None, :] - self.means[None]) ** 2).sum(-1)
        logc = self._log_w - 0.5 * sq / self.iso_var
        return logsumexp(logc, axis=1) - 0.5 * self.dim * (_LOG_2PI + np.log(self.iso_var))

    def sample(self, n, rng):
        comp = rng.choice(self.weights.size, size=n, p=self.weights)
        return self.means[comp] + np.sqrt(self.iso_var) * rng.standard_normal((n, self.dim))


def correlated_gaussian_target() -> GaussianTarget:
    """Bivariate Gaussian at (1/2, 1/2), unit variances, covariance entry 0.9."""
    return GaussianTarget([0.5, 0.5], [[1.0, 0.9], [0.9, 1.0]])


def three_component_gmm() -> GMMTarget:
    return GMMTarget(
        [0.3, 0.5, 0.2],
        [[1.54, -0.29], [-2.18, 0.57], [-1.09, -1.40]],
        std=0.2,
    )


def _evaluate(target: AnalyticTarget, s: NoiseSchedule, x, t: int):
    if not 1 <= int(t) <= s.T:
        raise IndexError(f"step index {t} outside [1, {s.T}]")
    scale, var = forward_marginal_params(s, t)
    X, single = _as_batch(x)
    if X.shape[1] != target.dim:
        raise ValueError(f"point has dimension {X.shape[1]}, target has {target.dim}")
    out = target.posterior(X, scale, var)
    if single:
        out = tuple(o[0] for o in out)
    return out


def marginal_score(target: AnalyticTarget, s: NoiseSchedule, x, t: int) -> np.ndarray:
    """Exact score of ``q(x^t)``."""
    return _evaluate(target, s, x, t)[2]


def marginal_logpdf(target: AnalyticTarget, s: NoiseSchedule, x, t: int):
    return _evaluate(target, s, x, t)[3]


def denoiser(target: AnalyticTarget, s: NoiseSchedule, x, t: int) -> DenoiserOutput:
    """Exact ``E_q[x0 | x^t]`` and its Jacobian (plus the score, for free)."""
    x_hat, jac, score, _ = _evaluate(target, s, x, t)
    return DenoiserOutput(x_hat, jac, score)


def denoiser_at_zero(target: Optional[AnalyticTarget], x0) -> DenoiserOutput:
    """At ``t = 0`` the denoiser is the identity."""
    x0 = np.array(x0, dtype=float)
    d = x0.shape[-1]
    eye = np.eye(d)
    jac = eye if x0.ndim == 1 else np.broadcast_to(eye, x0.shape[:-1] + (d, d)).copy()
    return DenoiserOutput(x0, jac, None)


def tweedie_score(s: NoiseSchedule, t: int, x, x_hat) -> np.ndarray:
    """Score implied by a denoiser: ``(scale * x_hat - x) / var``."""
    scale, var = forward_marginal_params(s, t)
    return (scale * np.asarray(x_hat) - np.asarray(x)) / var
