"""Twisted diffusion sampler and baselines on analytic-score diffusion models."""

from .kernels import BACKEND_NAME
from .schedule import (
    Framework,
    NoiseSchedule,
    forward_marginal_params,
    make_quadratic_vp_schedule,
    make_ve_const_schedule,
    make_ve_schedule,
    reverse_transition_params,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND_NAME",
    "Framework",
    "NoiseSchedule",
    "forward_marginal_params",
    "make_quadratic_vp_schedule",
    "make_ve_const_schedule",
    "make_ve_schedule",
    "reverse_transition_params",
]
