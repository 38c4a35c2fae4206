"""The compiled kernels and the numpy fallback must agree."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tdsampler import kernels

py = kernels.python_backend
cy = kernels.compiled_backend
needs_ext = pytest.mark.skipif(cy is None, reason="compiled extension not built")

log_weights = arrays(np.float64, st.integers(1, 300), elements=st.floats(-500, 500))


def test_backend_selected():
    assert kernels.BACKEND_NAME in ("compiled", "python")
    assert (kernels.backend is cy) == (kernels.BACKEND_NAME == "compiled")


@needs_ext
@settings(max_examples=200, deadline=None)
@given(lw=log_weights, u=st.floats(1e-12, 1 - 1e-12))
def test_systematic_equivalent(lw, u):
    w = py.log_normalize(lw)[0]
    assert np.array_equal(py.systematic_ancestors(w, u), cy.systematic_ancestors(w, u))


@needs_ext
@settings(max_examples=200, deadline=None)
@given(lw=log_weights)
def test_log_normalize_equivalent(lw):
    wp, tp = py.log_normalize(lw)
    wc, tc = cy.log_normalize(lw)
    assert np.allclose(wp, wc, rtol=1e-12, atol=1e-300)
    assert tp == pytest.approx(tc, rel=1e-13, abs=1e-13)


@needs_ext
@settings(max_examples=200, deadline=None)
@given(lw=log_weights)
def test_ess_equivalent(lw):
    assert py.ess_from_log_weights(lw) == pytest.approx(cy.ess_from_log_weights(lw), rel=1e-12)


@needs_ext
@settings(max_examples=100, deadline=None)
@given(
    K=st.integers(1, 40),
    J=st.integers(1, 5),
    d=st.integers(1, 4),
    comp_var=st.floats(0.01, 2.0),
    a=st.floats(0.05, 1.0),
    var=st.floats(1e-6, 2.0),
    seed=st.integers(0, 2**32 - 1),
)
def test_gmm_posterior_equivalent(K, J, d, comp_var, a, var, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 3, size=(K, d))
    means = rng.normal(0, 2, size=(J, d))
    log_mix = np.log(rng.dirichlet(np.ones(J)))
    out_p = py.gmm_posterior(x, means, log_mix, comp_var, a, var)
    out_c = cy.gmm_posterior(x, means, log_mix, comp_var, a, var)
    for p, c in zip(out_p, out_c):
        assert np.allclose(p, c, rtol=1e-10, atol=1e-10)


def test_pure_python_switch():
    env = dict(os.environ, TDSAMPLER_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import tdsampler; print(tdsampler.BACKEND_NAME)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
