"""Pure-numpy reference kernels.

Same signatures as the compiled ``_ckernels`` module; used when the
extension is unavailable or ``TDSAMPLER_PURE_PYTHON`` is set.
"""

import numpy as np

_LOG_2PI = np.log(2.0 * np.pi)


def systematic_ancestors(weights, u):
    """Ancestor indices from one uniform draw; lower index wins on ties."""
    w = np.asarray(weights, dtype=np.float64)
    K = w.shape[0]
    cum = np.cumsum(w)
    cum /= cum[-1]
    positions = (u + np.arange(K)) / K
    idx = np.searchsorted(cum, positions, side="left")
    return np.minimum(idx, K - 1).astype(np.int64)


def log_normalize(log_w):
    """Normalized weights and the log of the unnormalized total."""
    log_w = np.asarray(log_w, dtype=np.float64)
    m = np.max(log_w)
    w = np.exp(log_w - m)
    total = w.sum()
    return w / total, m + np.log(total)


def ess_from_log_weights(log_w):
    log_w = np.asarray(log_w, dtype=np.float64)
    w = np.exp(log_w - np.max(log_w))
    s = w.sum()
    return s * s / np.dot(w, w)


def gmm_posterior(x, means, log_mix, comp_var, scale, var):
    """Posterior quantities of an isotropic Gaussian mixture under noising.

    Model: ``x = scale * x0 + sqrt(var) * eps`` with
    ``x0 ~ sum_j pi_j Normal(means[j], comp_var * I)``.

    Returns ``(x_hat, jac, score, logpdf)`` for every row of ``x``:
    the posterior mean of ``x0``, its Jacobian in ``x``, the score of the
    marginal of ``x`` and the marginal log-density.
    """
    x = np.asarray(x, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    K, d = x.shape
    c = scale * scale * comp_var + var
    resid = x[:, None, :] - scale * means[None, :, :]  # (K, J, d)
    logits = log_mix[None, :] - 0.5 * np.einsum("kjd,kjd->kj", resid, resid) / c
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    tot = e.sum(axis=1, keepdims=True)
    r = e / tot
    logpdf = (mx + np.log(tot))[:, 0] - 0.5 * d * (_LOG_2PI + np.log(c))

    score = -np.einsum("kj,kjd->kd", r, resid) / c
    mbar = r @ means
    gain = scale * comp_var / c
    x_hat = (1.0 - scale * gain) * mbar + gain * x
    dm = means[None, :, :] - mbar[:, None, :]
    jac = np.einsum("kj,kja,kjb->kab", r, dm, dm) * (scale * var / (c * c))
    jac[:, np.arange(d), np.arange(d)] += gain
    return x_hat, jac, score, logpdf
