# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels; same contracts as fedsim._kernels_py."""

import numpy as np
from libc.math cimport sqrt, exp, log


def bn_forward_train(const double[:, ::1] x, const double[::1] gamma,
                     const double[::1] beta, double eps):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], i, j
    y_arr = np.empty((b, c))
    xhat_arr = np.empty((b, c))
    mean_arr = np.zeros(c)
    var_arr = np.zeros(c)
    inv_arr = np.empty(c)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr
    cdef double[::1] inv_std = inv_arr
    cdef double d
    with nogil:
        for i in range(b):
            for j in range(c):
                mean[j] += x[i, j]
        for j in range(c):
            mean[j] /= b
        for i in range(b):
            for j in range(c):
                d = x[i, j] - mean[j]
                var[j] += d * d
        for j in range(c):
            var[j] /= b
            inv_std[j] = 1.0 / sqrt(var[j] + eps)
        for i in range(b):
            for j in range(c):
                d = (x[i, j] - mean[j]) * inv_std[j]
                xhat[i, j] = d
                y[i, j] = d * gamma[j] + beta[j]
    return y_arr, xhat_arr, mean_arr, var_arr, inv_arr


def bn_forward_eval(const double[:, ::1] x, const double[::1] gamma,
                    const double[::1] beta, const double[::1] running_mean,
                    const double[::1] running_var, double eps):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], i, j
    y_arr = np.empty((b, c))
    inv_arr = np.empty(c)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] inv_std = inv_arr
    with nogil:
        for j in range(c):
            inv_std[j] = 1.0 / sqrt(running_var[j] + eps)
        for i in range(b):
            for j in range(c):
                y[i, j] = (x[i, j] - running_mean[j]) * inv_std[j] * gamma[j] + beta[j]
    return y_arr


def bn_backward(const double[:, ::1] dy, const double[:, ::1] xhat,
                const double[::1] gamma, const double[::1] inv_std):
    cdef Py_ssize_t b = dy.shape[0], c = dy.shape[1], i, j
    dx_arr = np.empty((b, c))
    dgamma_arr = np.zeros(c)
    dbeta_arr = np.zeros(c)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double dxh
    with nogil:
        for i in range(b):
            for j in range(c):
                dbeta[j] += dy[i, j]
                dgamma[j] += dy[i, j] * xhat[i, j]
        # sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
        for i in range(b):
            for j in range(c):
                dxh = dy[i, j] * gamma[j]
                dx[i, j] = (inv_std[j] / b) * (
                    b * dxh - gamma[j] * dbeta[j] - xhat[i, j] * gamma[j] * dgamma[j])
    return dx_arr, dgamma_arr, dbeta_arr


def softmax_xent(const double[:, ::1] logits, labels):
    cdef const long long[::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t b = logits.shape[0], k = logits.shape[1], i, j
    grad_arr = np.empty((b, k))
    cdef double[:, ::1] g = grad_arr
    cdef double m, s, total = 0.0
    with nogil:
        for i in range(b):
            m = logits[i, 0]
            for j in range(1, k):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(k):
                g[i, j] = exp(logits[i, j] - m)
                s += g[i, j]
            total += log(s) - (logits[i, lab[i]] - m)
            for j in range(k):
                g[i, j] = g[i, j] / s / b
            g[i, lab[i]] -= 1.0 / b
    return total / b, grad_arr


def welford_update(long long count, double[::1] mean, double[::1] m2,
                   const double[:, ::1] batch):
    cdef Py_ssize_t b = batch.shape[0], c = batch.shape[1], i, j
    cdef double delta
    with nogil:
        for i in range(b):
            count += 1
            for j in range(c):
                delta = batch[i, j] - mean[j]
                mean[j] += delta / count
                m2[j] += delta * (batch[i, j] - mean[j])
    return count


def pairwise_w2(const double[:, ::1] mus, const double[:, ::1] sds):
    cdef Py_ssize_t n = mus.shape[0], c = mus.shape[1], i, j, k
    out_arr = np.zeros((n, n))
    cdef double[:, ::1] out = out_arr
    cdef double acc, d
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                acc = 0.0
                for k in range(c):
                    d = mus[i, k] - mus[j, k]
                    acc += d * d
                for k in range(c):
                    d = sds[i, k] - sds[j, k]
                    acc += d * d
                acc = sqrt(acc)
                out[i, j] = acc
                out[j, i] = acc
    return out_arr
