"""Pure numpy implementations of the numerical kernels.

These mirror the compiled kernels in ``_ckernels.pyx`` one for one and are
used whenever the extension is unavailable or ``FEDSIM_BACKEND=python``.
All arrays are float64; 2-D inputs are ``(batch, channels)``.
"""

import numpy as np


def bn_forward_train(x, gamma, beta, eps):
    """Normalize with biased batch statistics.

    Returns ``(y, xhat, mean, var, inv_std)``.
    """
    mean = x.mean(axis=0)
    xc = x - mean
    var = (xc * xc).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gamma + beta, xhat, mean, var, inv_std


def bn_forward_eval(x, gamma, beta, running_mean, running_var, eps):
    inv_std = 1.0 / np.sqrt(running_var + eps)
    return (x - running_mean) * inv_std * gamma + beta


def bn_backward(dy, xhat, gamma, inv_std):
    """Backward pass of train-mode BN. Returns ``(dx, dgamma, dbeta)``."""
    b = dy.shape[0]
    dbeta = dy.sum(axis=0)
    dgamma = (dy * xhat).sum(axis=0)
    dxhat = dy * gamma
    dx = (inv_std / b) * (b * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    b = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sumexp = exp.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    loss = float(np.mean(np.log(sumexp[:, 0]) - shifted[rows, labels]))
    dlogits = exp / sumexp
    dlogits[rows, labels] -= 1.0
    dlogits /= b
    return loss, dlogits


def welford_update(count, mean, m2, batch):
    """Fold ``batch`` rows into running (count, mean, m2), one sample at a time.

    ``mean`` and ``m2`` are updated in place; the new count is returned.
    """
    for row in batch:
        count += 1
        delta = row - mean
        mean += delta / count
        m2 += delta * (row - mean)
    return count


def pairwise_w2(mus, sds):
    """Matrix of ``sqrt(||mu_i - mu_j||^2 + ||sd_i - sd_j||^2)`` over rows."""
    n = mus.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dm = mus[i] - mus[j]
            ds = sds[i] - sds[j]
            d = np.sqrt(np.dot(dm, dm) + np.dot(ds, ds))
            out[i, j] = d
            out[j, i] = d
    return out
