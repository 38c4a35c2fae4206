# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; mirrors ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, M_PI

cnp.import_array()


def systematic_ancestors(const double[::1] weights, double u):
    cdef Py_ssize_t K = weights.shape[0]
    cdef Py_ssize_t i, k = 0
    cdef double total = 0.0, cum, pos
    out = np.empty(K, dtype=np.int64)
    cdef long long[::1] idx = out
    for i in range(K):
        total += weights[i]
    # running raw sum divided at comparison time reproduces cumsum / cum[-1]
    cum = weights[0]
    for i in range(K):
        pos = (u + i) / K
        while cum / total < pos and k < K - 1:
            k += 1
            cum += weights[k]
        idx[i] = k
    return out


def log_normalize(const double[::1] log_w):
    cdef Py_ssize_t K = log_w.shape[0]
    cdef Py_ssize_t i
    cdef double m = log_w[0], total = 0.0
    for i in range(1, K):
        if log_w[i] > m:
            m = log_w[i]
    out = np.empty(K, dtype=np.float64)
    cdef double[::1] w = out
    for i in range(K):
        w[i] = exp(log_w[i] - m)
        total += w[i]
    for i in range(K):
        w[i] /= total
    return out, m + log(total)


def ess_from_log_weights(const double[::1] log_w):
    cdef Py_ssize_t K = log_w.shape[0]
    cdef Py_ssize_t i
    cdef double m = log_w[0], s = 0.0, s2 = 0.0, w
    for i in range(1, K):
        if log_w[i] > m:
            m = log_w[i]
    for i in range(K):
        w = exp(log_w[i] - m)
        s += w
        s2 += w * w
    return s * s / s2


def gmm_posterior(x_in, means_in, log_mix_in, double comp_var, double scale, double var):
    cdef const double[:, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef const double[:, ::1] means = np.ascontiguousarray(means_in, dtype=np.float64)
    cdef const double[::1] log_mix = np.ascontiguousarray(log_mix_in, dtype=np.float64)
    cdef Py_ssize_t K = x.shape[0], d = x.shape[1], J = means.shape[0]
    cdef Py_ssize_t k, j, a, b
    cdef double c = scale * scale * comp_var + var
    cdef double gain = scale * comp_var / c
    cdef double jscale = scale * var / (c * c)
    cdef double norm_const = -0.5 * d * (log(2.0 * M_PI) + log(c))
    cdef double mx, tot, diff, q

    x_hat_a = np.empty((K, d))
    jac_a = np.zeros((K, d, d))
    score_a = np.empty((K, d))
    logpdf_a = np.empty(K)
    cdef double[:, ::1] x_hat = x_hat_a
    cdef double[:, :, ::1] jac = jac_a
    cdef double[:, ::1] score = score_a
    cdef double[::1] logpdf = logpdf_a
    cdef double[::1] logits = np.empty(J)
    cdef double[::1] mbar = np.empty(d)

    for k in range(K):
        mx = -1e308
        for j in range(J):
            q = 0.0
            for a in range(d):
                diff = x[k, a] - scale * means[j, a]
                q += diff * diff
            logits[j] = log_mix[j] - 0.5 * q / c
            if logits[j] > mx:
                mx = logits[j]
        tot = 0.0
        for j in range(J):
            logits[j] = exp(logits[j] - mx)
            tot += logits[j]
        logpdf[k] = mx + log(tot) + norm_const
        for a in range(d):
            mbar[a] = 0.0
        for j in range(J):
            logits[j] /= tot
            for a in range(d):
                mbar[a] += logits[j] * means[j, a]
        for a in range(d):
            score[k, a] = -(x[k, a] - scale * mbar[a]) / c
            x_hat[k, a] = (1.0 - scale * gain) * mbar[a] + gain * x[k, a]
        for j in range(J):
            for a in range(d):
                diff = (means[j, a] - mbar[a]) * logits[j] * jscale
                for b in range(d):
                    jac[k, a, b] += diff * (means[j, b] - mbar[b])
        for a in range(d):
            jac[k, a, a] += gain
    return x_hat_a, jac_a, score_a, logpdf_a
