"""Kernel backend selection.

The compiled extension is used when it imports cleanly; setting
``TDSAMPLER_PURE_PYTHON=1`` forces the numpy fallback.  Both backends are
importable directly for comparison (see ``benchmarks/bench_kernels.py``).
"""

import os

from . import _kernels_py as python_backend

compiled_backend = None
if not os.environ.get("TDSAMPLER_PURE_PYTHON"):
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

backend = compiled_backend if compiled_backend is not None else python_backend
BACKEND_NAME = "compiled" if compiled_backend is not None else "python"

systematic_ancestors = backend.systematic_ancestors
log_normalize = backend.log_normalize
ess_from_log_weights = backend.ess_from_log_weights
gmm_posterior = backend.gmm_posterior

__all__ = [
    "BACKEND_NAME",
    "backend",
    "compiled_backend",
    "python_backend",
    "systematic_ancestors",
    "log_normalize",
    "ess_from_log_weights",
    "gmm_posterior",
]
