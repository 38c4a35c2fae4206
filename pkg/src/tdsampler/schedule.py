"""Forward-process noise schedules for VE and VP diffusions.

States are indexed ``x^0 .. x^T``; ``step_vars[t - 1]`` is the variance of the
transition between ``x^{t-1}`` and ``x^t``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class Framework(str, enum.Enum):
    VE_CONST = "ve_const"
    VE_GENERAL = "ve_general"
    VP = "vp"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Immutable schedule with cumulative quantities cached at construction.

    Arrays are indexed by step ``t`` directly: position 0 holds the ``t = 0``
    values (``cum_alpha[0] = 1``, ``cum_var[0] = 0``), so ``cum_var[t]`` is
    the forward variance of ``x^t`` given ``x^0``.
    """

    framework: Framework
    step_vars: np.ndarray
    cum_alpha: np.ndarray = field(init=False, repr=False)
    cum_var: np.ndarray = field(init=False, repr=False)
    _padded_vars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        fw = Framework(self.framework)
        v = np.array(self.step_vars, dtype=float).reshape(-1)
        if v.size == 0:
            raise ValueError("schedule needs at least one step (T >= 1)")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError("step variances must be finite and strictly positive")
        if fw is Framework.VE_CONST and np.any(v != v[0]):
            raise ValueError("VE_CONST schedule requires identical step variances")
        if fw in (Framework.VE_GENERAL, Framework.VP) and np.any(np.diff(v) < 0):
            raise ValueError("step variances must be nondecreasing in t")
        if fw is Framework.VP and np.any(v >= 1):
            raise ValueError("VP step variances must be < 1")
        v.setflags(write=False)
        object.__setattr__(self, "framework", fw)
        object.__setattr__(self, "step_vars", v)

        T = v.size
        padded = np.concatenate([[0.0], v])
        if fw is Framework.VP:
            cum_alpha = np.cumprod(1.0 - padded)
            cum_var = 1.0 - cum_alpha
        else:
            cum_alpha = np.ones(T + 1)
            # one accumulation path for both VE variants keeps them bit-identical
            cum_var = np.cumsum(padded)
        for arr in (padded, cum_alpha, cum_var):
            arr.setflags(write=False)
        object.__setattr__(self, "_padded_vars", padded)
        object.__setattr__(self, "cum_alpha", cum_alpha)
        object.__setattr__(self, "cum_var", cum_var)

    @property
    def T(self) -> int:
        return int(self.step_vars.size)

    @property
    def is_vp(self) -> bool:
        return self.framework is Framework.VP

    def _check(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise IndexError(f"step index {t} outside [{lo}, {self.T}]")
        return t

    def step_var(self, t: int) -> float:
        """Variance ``sigma_t^2`` of the transition into ``x^t``."""
        return float(self._padded_vars[self._check(t)])

    def alpha(self, t: int) -> float:
        """``1 - sigma_t^2`` for VP, 1 for VE."""
        t = self._check(t)
        return 1.0 - float(self._padded_vars[t]) if self.is_vp else 1.0

    def prior_params(self) -> tuple[float, float]:
        """Mean scale and variance of the reference ``p(x^T) = Normal(0, var I)``."""
        return 0.0, (1.0 if self.is_vp else float(self.cum_var[self.T]))

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return self.framework is other.framework and np.array_equal(
            self.step_vars, other.step_vars
        )

    def __hash__(self):
        return hash((self.framework, self.step_vars.tobytes()))


def make_quadratic_vp_schedule(
    T: int = 100, var_min: float = 1e-5, var_max: float = 1e-1
) -> NoiseSchedule:
    """VP schedule with ``sigma_t^2 = var_min + (t/T)^2 * var_max``."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not 0 < var_min < var_max:
        raise ValueError("need 0 < var_min < var_max")
    if var_max >= 1 or var_min + var_max >= 1:
        raise ValueError("VP schedule requires every step variance < 1")
    t = np.arange(1, int(T) + 1, dtype=float)
    return NoiseSchedule(Framework.VP, var_min + (t / T) ** 2 * var_max)


def make_ve_const_schedule(T: int, sigma2: float) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    return NoiseSchedule(Framework.VE_CONST, np.full(int(T), float(sigma2)))


def make_ve_schedule(step_vars) -> NoiseSchedule:
    return NoiseSchedule(Framework.VE_GENERAL, np.asarray(step_vars, dtype=float))


def forward_marginal_params(s: NoiseSchedule, t: int) -> tuple[float, float]:
    """``(scale, var)`` with ``q(x^t | x^0) = Normal(scale * x^0, var * I)``.

    ``t = 0`` is accepted and returns the identity ``(1, 0)``.
    """
    t = s._check(t, lo=0)
    return float(np.sqrt(s.cum_alpha[t])), float(s.cum_var[t])


def forward_step_params(s: NoiseSchedule, t: int) -> tuple[float, float]:
    """``(scale, var)`` of the single forward transition ``q(x^t | x^{t-1})``."""
    return float(np.sqrt(s.alpha(t))), s.step_var(t)


def reverse_transition_params(s: NoiseSchedule, t: int, x_next, score):
    """Mean and variance of ``p(x^{t-1} | x^t)`` given the score at ``(x^t, t)``.

    VE: ``x + sigma_t^2 * score``.  VP uses the ancestral (DDPM) mean
    ``(x + sigma_t^2 * score) / sqrt(alpha_t)``, which leaves a Gaussian
    stationary distribution invariant to first order in ``sigma_t^2``.
    Works row-wise on ``(K, d)`` arrays.
    """
    var = s.step_var(t)
    mean = np.asarray(x_next, dtype=float) + var * np.asarray(score, dtype=float)
    if s.is_vp:
        mean = mean / np.sqrt(1.0 - var)
    return mean, var
