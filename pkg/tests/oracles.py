"""Independent brute-force oracles for kernel and metric tests.

These are deliberately naive re-implementations (explicit loops, direct
summation) kept free of any code path they are used to check.
"""
from __future__ import annotations

import numpy as np


def conv2d_zonal_periodic_naive(x, kernel, bias=None, stride=1):
    """Quadruple-loop cross-correlation: circular in lon, zero-padded in lat."""
    b, c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    oh = -(-h // stride)
    ow = -(-w // stride)
    out = np.zeros((b, c_out, oh, ow))
    for bi in range(b):
        for co in range(c_out):
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(c_in):
                        for ki in range(kh):
                            for kj in range(kw):
                                ii = oi * stride + ki - kh // 2
                                jj = (oj * stride + kj - kw // 2) % w
                                if 0 <= ii < h:
                                    acc += x[bi, ci, ii, jj] * kernel[co, ci, ki, kj]
                    out[bi, co, oi, oj] = acc
            if bias is not None:
                out[bi, co] += bias[co]
    return out


def group_norm_naive(x, n_groups, gamma, beta, eps=1e-5):
    b, c, h, w = x.shape
    gs = c // n_groups
    out = np.empty_like(x, dtype=float)
    for bi in range(b):
        for g in range(n_groups):
            vals = x[bi, g * gs : (g + 1) * gs]
            mean = vals.mean()
            var = vals.var()
            out[bi, g * gs : (g + 1) * gs] = (vals - mean) / np.sqrt(var + eps)
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    for bi in range(b):
        for ci in range(c):
            gm = gamma[ci] if gamma.ndim == 1 else gamma[bi, ci]
            bt = beta[ci] if beta.ndim == 1 else beta[bi, ci]
            out[bi, ci] = out[bi, ci] * gm + bt
    return out


def self_attention_naive(x, w_q, w_k, w_v, w_out):
    """O(N^2) loop attention over flattened spatial positions, with residual."""
    b, c, h, w = x.shape
    n = h * w
    out = np.empty_like(x, dtype=float)
    for bi in range(b):
        tokens = x[bi].reshape(c, n).T  # (n, c)
        q = tokens @ w_q.T
        k = tokens @ w_k.T
        v = tokens @ w_v.T
        att_out = np.empty((n, c))
        for i in range(n):
            scores = np.array([q[i] @ k[j] for j in range(n)]) / np.sqrt(c)
            e = np.exp(scores - scores.max())
            a = e / e.sum()
            att_out[i] = sum(a[j] * v[j] for j in range(n)) @ w_out.T
        out[bi] = x[bi] + att_out.T.reshape(c, h, w)
    return out


def norm_stats_naive(seasons_values):
    """Five-nested-loop per-channel mean/std over (year, day, lat, lon)."""
    n_channels = seasons_values[0].shape[1]
    means = np.zeros(n_channels)
    stds = np.zeros(n_channels)
    for c in range(n_channels):
        total, count = 0.0, 0
        for vals in seasons_values:
            for d in range(vals.shape[0]):
                for hh in range(vals.shape[2]):
                    for ww in range(vals.shape[3]):
                        total += vals[d, c, hh, ww]
                        count += 1
        m = total / count
        sq = 0.0
        for vals in seasons_values:
            for d in range(vals.shape[0]):
                for hh in range(vals.shape[2]):
                    for ww in range(vals.shape[3]):
                        sq += (vals[d, c, hh, ww] - m) ** 2
        means[c] = m
        stds[c] = np.sqrt(sq / count)
    return means, stds


def rmse_naive(pred, truth):
    total = 0.0
    n = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            total += (pred[i, j] - truth[i, j]) ** 2
            n += 1
    return np.sqrt(total / n)


def acc_naive(pred, truth, clim):
    num, dp, dt = 0.0, 0.0, 0.0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            a = pred[i, j] - clim[i, j]
            b = truth[i, j] - clim[i, j]
            num += a * b
            dp += a * a
            dt += b * b
    return num / np.sqrt(dp * dt)


def finite_difference_grad(f, x, step=1e-4):
    """Central finite differences of a scalar function of a numpy array."""
    g = np.zeros_like(x, dtype=float)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor)
