"""Hot numeric kernels.

Every kernel has a numba implementation (``*_nb``) and a pure-numpy one
(``*_np``). The public names are bound to one of them at import time
according to :data:`atta._jit.USE_NUMBA`. Both paths take and return the
same dtypes and shapes; the benchmark in ``benchmarks/`` exercises both.
"""
import math

import numpy as np

from ._jit import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# 3x3 / stride 1 / pad 1 patch extraction on channel-last maps
#
# Column layout is (ky, kx, c) fastest-last, matching a conv weight of shape
# (3, 3, C_in, C_out) reshaped to (9 * C_in, C_out).
# ---------------------------------------------------------------------------


def im2col3x3_np(x):
    h, w, c = x.shape
    xp = np.zeros((h + 2, w + 2, c), dtype=x.dtype)
    xp[1:-1, 1:-1] = x
    cols = np.empty((h, w, 9, c), dtype=x.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, k, :] = xp[dy:dy + h, dx:dx + w]
            k += 1
    return cols.reshape(h * w, 9 * c)


@njit
def im2col3x3_nb(x):
    h, w, c = x.shape
    cols = np.zeros((h * w, 9 * c), dtype=x.dtype)
    for i in range(h):
        for j in range(w):
            row = i * w + j
            k = 0
            for dy in range(-1, 2):
                ii = i + dy
                for dx in range(-1, 2):
                    jj = j + dx
                    if 0 <= ii < h and 0 <= jj < w:
                        base = k * c
                        for ch in range(c):
                            cols[row, base + ch] = x[ii, jj, ch]
                    k += 1
    return cols


def col2im3x3_np(cols, h, w, c):
    """Adjoint of :func:`im2col3x3_np`: scatter-add patch columns back."""
    cols = cols.reshape(h, w, 9, c)
    xp = np.zeros((h + 2, w + 2, c), dtype=cols.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            xp[dy:dy + h, dx:dx + w] += cols[:, :, k, :]
            k += 1
    return xp[1:-1, 1:-1].copy()


@njit
def col2im3x3_nb(cols, h, w, c):
    out = np.zeros((h, w, c), dtype=cols.dtype)
    for i in range(h):
        for j in range(w):
            row = i * w + j
            k = 0
            for dy in range(-1, 2):
                ii = i + dy
                for dx in range(-1, 2):
                    jj = j + dx
                    if 0 <= ii < h and 0 <= jj < w:
                        base = k * c
                        for ch in range(c):
                            out[ii, jj, ch] += cols[row, base + ch]
                    k += 1
    return out


# ---------------------------------------------------------------------------
# Per-channel mean / biased std with float64 accumulation
# ---------------------------------------------------------------------------


def channel_stats_np(z):
    z64 = z.astype(np.float64)
    mean = z64.mean(axis=0)
    var = np.maximum(((z64 - mean) ** 2).mean(axis=0), 0.0)
    return mean, np.sqrt(var)


@njit
def channel_stats_nb(z):
    n, c = z.shape
    mean = np.zeros(c)
    for i in range(n):
        for ch in range(c):
            mean[ch] += z[i, ch]
    for ch in range(c):
        mean[ch] /= n
    var = np.zeros(c)
    for i in range(n):
        for ch in range(c):
            d = z[i, ch] - mean[ch]
            var[ch] += d * d
    std = np.empty(c)
    for ch in range(c):
        std[ch] = math.sqrt(var[ch] / n)
    return mean, std


# ---------------------------------------------------------------------------
# Training-mode BN + ReLU, forward and backward, on (N, C) activations.
# ``inv`` is 1 / sqrt(var + eps) of the batch statistics.
# ---------------------------------------------------------------------------


def bn_relu_train_forward_np(z, mean, inv, gamma, beta):
    xhat = (z - mean) * inv
    out = np.maximum(xhat * gamma + beta, 0.0)
    return xhat, out


@njit
def bn_relu_train_forward_nb(z, mean, inv, gamma, beta):
    n, c = z.shape
    xhat = np.empty_like(z)
    out = np.empty_like(z)
    for i in range(n):
        for ch in range(c):
            v = (z[i, ch] - mean[ch]) * inv[ch]
            xhat[i, ch] = v
            y = v * gamma[ch] + beta[ch]
            out[i, ch] = y if y > 0 else 0.0
    return xhat, out


def bn_relu_train_backward_np(dout, xhat, out, inv, gamma):
    """Returns ``(dz, dgamma, dbeta)``."""
    dy = np.where(out > 0, dout, 0.0).astype(dout.dtype)
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    n = dy.shape[0]
    dz = (gamma * inv / n) * (n * dy - dbeta - xhat * dgamma)
    return dz.astype(dout.dtype), dgamma, dbeta


@njit
def bn_relu_train_backward_nb(dout, xhat, out, inv, gamma):
    n, c = dout.shape
    dgamma = np.zeros(c, dtype=dout.dtype)
    dbeta = np.zeros(c, dtype=dout.dtype)
    for i in range(n):
        for ch in range(c):
            if out[i, ch] > 0:
                d = dout[i, ch]
                dgamma[ch] += d * xhat[i, ch]
                dbeta[ch] += d
    coef = gamma * inv / n
    dz = np.empty_like(dout)
    for i in range(n):
        for ch in range(c):
            d = dout[i, ch] if out[i, ch] > 0 else 0.0
            dz[i, ch] = coef[ch] * (n * d - dbeta[ch] - xhat[i, ch] * dgamma[ch])
    return dz, dgamma, dbeta


# ---------------------------------------------------------------------------
# One EM iteration for a two-component 1-D Gaussian mixture.
# Returns the updated (pi, mu, sigma) and the log-likelihood of the *input*
# parameters, so a caller can track the likelihood sequence exactly.
# ---------------------------------------------------------------------------

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def em_step_np(x, pi, mu, sigma):
    logp = (np.log(pi)[None, :] - np.log(sigma)[None, :] - _LOG_SQRT_2PI
            - 0.5 * ((x[:, None] - mu[None, :]) / sigma[None, :]) ** 2)
    m = logp.max(axis=1)
    lse = m + np.log(np.exp(logp[:, 0] - m) + np.exp(logp[:, 1] - m))
    loglik = lse.sum()
    resp = np.exp(logp - lse[:, None])
    nk = resp.sum(axis=0)
    new_pi = nk / x.shape[0]
    new_mu = (resp * x[:, None]).sum(axis=0) / nk
    new_var = (resp * (x[:, None] - new_mu[None, :]) ** 2).sum(axis=0) / nk
    return new_pi, new_mu, np.sqrt(new_var), loglik


@njit
def em_step_nb(x, pi, mu, sigma):
    n = x.shape[0]
    c0 = math.log(pi[0]) - math.log(sigma[0]) - _LOG_SQRT_2PI
    c1 = math.log(pi[1]) - math.log(sigma[1]) - _LOG_SQRT_2PI
    r1 = np.empty(n)
    loglik = 0.0
    nk0 = 0.0
    nk1 = 0.0
    s0 = 0.0
    s1 = 0.0
    for i in range(n):
        u0 = (x[i] - mu[0]) / sigma[0]
        u1 = (x[i] - mu[1]) / sigma[1]
        l0 = c0 - 0.5 * u0 * u0
        l1 = c1 - 0.5 * u1 * u1
        m = l0 if l0 > l1 else l1
        e0 = math.exp(l0 - m)
        e1 = math.exp(l1 - m)
        tot = e0 + e1
        loglik += m + math.log(tot)
        p1 = e1 / tot
        p0 = e0 / tot
        r1[i] = p1
        nk0 += p0
        nk1 += p1
        s0 += p0 * x[i]
        s1 += p1 * x[i]
    mu0 = s0 / nk0
    mu1 = s1 / nk1
    v0 = 0.0
    v1 = 0.0
    for i in range(n):
        d0 = x[i] - mu0
        d1 = x[i] - mu1
        v0 += (1.0 - r1[i]) * d0 * d0
        v1 += r1[i] * d1 * d1
    new_pi = np.array([nk0 / n, nk1 / n])
    new_mu = np.array([mu0, mu1])
    new_sigma = np.array([math.sqrt(v0 / nk0), math.sqrt(v1 / nk1)])
    return new_pi, new_mu, new_sigma, loglik


if USE_NUMBA:
    im2col3x3 = im2col3x3_nb
    col2im3x3 = col2im3x3_nb
    channel_stats = channel_stats_nb
    bn_relu_train_forward = bn_relu_train_forward_nb
    bn_relu_train_backward = bn_relu_train_backward_nb
    em_step = em_step_nb
else:
    im2col3x3 = im2col3x3_np
    col2im3x3 = col2im3x3_np
    channel_stats = channel_stats_np
    bn_relu_train_forward = bn_relu_train_forward_np
    bn_relu_train_backward = bn_relu_train_backward_np
    em_step = em_step_np

BACKEND = "numba" if USE_NUMBA else "numpy"
