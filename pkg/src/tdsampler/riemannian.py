"""SO(3) geometry for Riemannian twisted SMC.

Tangent vectors are axis-angle 3-vectors in the Lie algebra at a base
rotation (left-invariant frame): ``exp_R(v) = R @ Exp(v)``.  The metric makes
the geodesic distance equal to the rotation angle, under which the total
volume of SO(3) is ``8 pi^2``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from .errors import DomainError

_LOG_2PI = np.log(2.0 * np.pi)
SMALL_ANGLE = 1e-8
ANTIPODAL_MARGIN = 1e-6
ORTHO_TOL = 1e-12
SO3_VOLUME = 8.0 * np.pi**2


def hat(v) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def orthonormality_residual(R) -> float:
    R = np.asarray(R, dtype=float)
    return float(np.max(np.abs(R.T @ R - np.eye(3))))


def project_to_so3(R) -> np.ndarray:
    """Closest rotation in Frobenius norm (polar factor)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    return (
        R.shape == (3, 3)
        and orthonormality_residual(R) <= tol
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def _rodrigues(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    th2 = float(v @ v)
    th = np.sqrt(th2)
    K = hat(v)
    if th < SMALL_ANGLE:
        a = 1.0 - th2 / 6.0
        b = 0.5 - th2 / 24.0
    else:
        a = np.sin(th) / th
        b = (1.0 - np.cos(th)) / th2
    return np.eye(3) + a * K + b * (K @ K)


def exp_so3(base, v) -> np.ndarray:
    """``base @ Exp(v)``, re-projected onto SO(3) if round-off has drifted."""
    R = np.asarray(base, dtype=float) @ _rodrigues(v)
    if orthonormality_residual(R) > ORTHO_TOL:
        R = project_to_so3(R)
    return R


def rotation_angle(R) -> float:
    # atan2 keeps full precision near 0 and pi, where arccos of the trace does not
    R = np.asarray(R, dtype=float)
    s = np.linalg.norm(vee(R - R.T)) / 2.0
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arctan2(s, c))


def log_so3(base, target) -> np.ndarray:
    """Tangent vector at ``base`` pointing to ``target`` (inverse of :func:`exp_so3`)."""
    R = np.asarray(base, dtype=float).T @ np.asarray(target, dtype=float)
    th = rotation_angle(R)
    if th > np.pi - ANTIPODAL_MARGIN:
        raise DomainError(f"rotations are {th:.9f} rad apart; log map undefined near pi")
    w = vee(R - R.T) / 2.0
    if th < SMALL_ANGLE:
        return w * (1.0 + th * th / 6.0)
    return w * (th / np.sin(th))


def geodesic_distance(R1, R2) -> float:
    return rotation_angle(np.asarray(R1, dtype=float).T @ np.asarray(R2, dtype=float))


def log_inverse_exp_jacobian(theta: float) -> float:
    """``log |d Exp^{-1} / dy|`` at angle ``theta``: ``log(theta^2 / (2 (1 - cos theta)))``."""
    if theta < 1e-4:
        return theta * theta / 12.0 + theta**4 / 720.0
    return float(np.log(theta * theta / (2.0 * (1.0 - np.cos(theta)))))


def _iso_logpdf(v, mu, var) -> float:
    r = np.asarray(v, dtype=float) - np.asarray(mu, dtype=float)
    return float(-0.5 * (3 * (_LOG_2PI + np.log(var)) + r @ r / var))


def tangent_normal_logpdf(center, point, mu, var: float) -> float:
    """Log-density (w.r.t. the Riemannian volume) of ``exp_center(N(mu, var I))``."""
    v = log_so3(center, point)
    return _iso_logpdf(v, mu, var) + log_inverse_exp_jacobian(float(np.linalg.norm(v)))


def tangent_normal_sample(center, mu, var: float, rng: np.random.Generator) -> np.ndarray:
    return exp_so3(center, np.asarray(mu, float) + np.sqrt(var) * rng.standard_normal(3))


def geodesic_walk_step(x_next, score, step_var: float, rng: np.random.Generator) -> np.ndarray:
    """One reverse step: ``exp(x_next, step_var * score + sqrt(step_var) * xi)``."""
    xi = rng.standard_normal(3)
    return exp_so3(x_next, step_var * np.asarray(score, float) + np.sqrt(step_var) * xi)


def riemannian_weight(
    x_t,
    x_next,
    uncond_score,
    cond_score,
    step_var: float,
    proposal_var: float,
    twist_log_t: float,
    twist_log_next: float,
    include_jacobian: bool = False,
) -> float:
    """Log incremental weight of a Riemannian twisted step.

    Both transition densities are tangent normals centred at ``x_next``, so
    their exp-map Jacobians are the same factor and cancel; set
    ``include_jacobian=True`` to evaluate them anyway.
    """
    v = log_so3(x_next, x_t)
    log_model = _iso_logpdf(v, step_var * np.asarray(uncond_score, float), step_var)
    log_prop = _iso_logpdf(v, step_var * np.asarray(cond_score, float), proposal_var)
    if include_jacobian:
        lj = log_inverse_exp_jacobian(float(np.linalg.norm(v)))
        log_model += lj
        log_prop += lj
    return log_model + twist_log_t - log_prop - twist_log_next


def frobenius_log_twist(center, point, var: float) -> float:
    """Tangent-normal log-density (``mu = 0``) approximated by ``||center - point||_F^2``.

    ``||R1 - R2||_F^2 = 4 (1 - cos theta) ~ 2 theta^2`` for small angles.
    """
    diff = np.asarray(center, float) - np.asarray(point, float)
    return float(-np.sum(diff * diff) / (4.0 * var) - 1.5 * (_LOG_2PI + np.log(var)))


def haar_sample(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` uniformly distributed rotations (from normalized Gaussian quaternions)."""
    q = rng.standard_normal((n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)], -1),
            np.stack([2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)], -1),
            np.stack([2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=1,
    )


def _batch_angles(R) -> np.ndarray:
    tr = np.einsum("kii->k", R)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def haar_normalization(var: float, n: int, rng: np.random.Generator):
    """Monte Carlo estimate of the tangent normal's total mass (``mu = 0``, center ``I``).

    Uses uniform rotations: ``mass = 8 pi^2 * E_uniform[p]``.  Returns the
    estimate and its standard error.
    """
    R = haar_sample(n, rng)
    th = _batch_angles(R)
    th = th[th < np.pi - ANTIPODAL_MARGIN]
    small = th < 1e-4
    with np.errstate(divide="ignore", invalid="ignore"):
        lj = np.where(small, th * th / 12.0, np.log(th * th / (2.0 * (1.0 - np.cos(th)))))
    logp = -0.5 * (3 * (_LOG_2PI + np.log(var)) + th * th / var) + lj
    vals = SO3_VOLUME * np.exp(logp)
    vals = np.concatenate([vals, np.zeros(n - th.size)])
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n))


# --- property suite -------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _random_tangent(rng, max_norm):
    v = rng.standard_normal(3)
    v /= np.linalg.norm(v)
    return v * rng.uniform(0.0, max_norm)


def check_round_trip(rng, n=10_000, tol=1e-9) -> CheckResult:
    worst = 0.0
    for base in haar_sample(n, rng):
        v = _random_tangent(rng, np.pi - 0.1)
        worst = max(worst, float(np.linalg.norm(log_so3(base, exp_so3(base, v)) - v)))
    return CheckResult("exp/log round trip", worst <= tol, f"max error {worst:.3e} (tol {tol:g})")


def check_walk_drift(rng, n=10_000, tol=1e-9) -> CheckResult:
    R = np.eye(3)
    worst = 0.0
    for _ in range(n):
        R = geodesic_walk_step(R, rng.standard_normal(3), 0.05, rng)
        worst = max(worst, orthonormality_residual(R), abs(np.linalg.det(R) - 1.0))
    return CheckResult("chained walk stays on SO(3)", worst <= tol, f"max residual {worst:.3e}")


def check_normalization(rng, var=0.1, n=1_000_000, tol=0.02) -> CheckResult:
    mass, se = haar_normalization(var, n, rng)
    return CheckResult(
        "tangent normal integrates to 1",
        abs(mass - 1.0) <= tol,
        f"mass {mass:.4f} +/- {se:.4f} at var={var:g} (tol {tol:g})",
    )


def check_jacobian_cancellation(rng, n=1000, tol=1e-10) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        x_next = haar_sample(1, rng)[0]
        x_t = exp_so3(x_next, _random_tangent(rng, 2.5))
        args = (
            x_t, x_next, rng.standard_normal(3), rng.standard_normal(3),
            rng.uniform(0.01, 1.0), rng.uniform(0.01, 1.0),
            rng.standard_normal(), rng.standard_normal(),
        )
        d = riemannian_weight(*args, include_jacobian=True) - riemannian_weight(*args)
        worst = max(worst, abs(d))
    return CheckResult("Jacobian terms cancel in weights", worst <= tol, f"max diff {worst:.3e}")


def check_frobenius_limit(rng, var=1e-4, n=1000, tol=1e-3) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        c = haar_sample(1, rng)[0]
        p = tangent_normal_sample(c, np.zeros(3), var, rng)
        diff = frobenius_log_twist(c, p, var) - tangent_normal_logpdf(c, p, np.zeros(3), var)
        worst = max(worst, abs(np.expm1(diff)))
    return CheckResult(
        "Frobenius twist matches tangent normal",
        bool(worst <= tol),
        f"max |ratio - 1| {worst:.3e} at var={var:g}",
    )


def check_flat_limit(rng, var=1e-3, n=1000, tol=1e-3) -> CheckResult:
    """Probes lie within three standard deviations of the centre."""
    worst = 0.0
    for _ in range(n):
        c = haar_sample(1, rng)[0]
        mu = np.zeros(3)
        p = exp_so3(c, _random_tangent(rng, 3.0 * np.sqrt(var)))
        flat = _iso_logpdf(log_so3(c, p), mu, var)
        worst = max(worst, abs(tangent_normal_logpdf(c, p, mu, var) - flat))
    return CheckResult("narrow tangent normal is locally flat", worst <= tol, f"max diff {worst:.3e}")


ALL_CHECKS: List[Callable[..., CheckResult]] = [
    check_round_trip,
    check_walk_drift,
    check_normalization,
    check_jacobian_cancellation,
    check_frobenius_limit,
    check_flat_limit,
]


def run_property_suite(seed: int = 0, quick: bool = False) -> List[CheckResult]:
    """Run every SO(3) check; ``quick`` shrinks sample sizes (for smoke tests)."""
    out = []
    for i, check in enumerate(ALL_CHECKS):
        rng = np.random.default_rng([seed, i])
        if quick:
            n = 200_000 if check is check_normalization else 200
            out.append(check(rng, n=n))
        else:
            out.append(check(rng))
    return out
