"""Hot numeric kernels: 1-D convolution forward/backward.

These dominate the training step, so each has a numba ``@njit`` version and
a pure-numpy fallback (BLAS matmul over kernel taps). The active path is
picked at import time by :mod:`songdisc.backend`; both paths agree to
floating-point roundoff and are compared in ``benchmarks/bench_kernels.py``.

All convolutions are stride-1, same-padding, odd kernel size, on arrays of
shape [batch, channels, time]. Normalization kernels take the key mask as a
[batch, time] array of 0/1 floats.
"""

import numpy as np

from .backend import USE_NUMBA


def _pad_time(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b, c, t = x.shape
    xp = np.zeros((b, c, t + 2 * p), dtype=x.dtype)
    xp[:, :, p:p + t] = x
    return xp


# ---------------------------------------------------------------------------
# numpy path

def conv1d_forward_numpy(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x [B,C,T], w [O,C,K], b [O] -> y [B,O,T]."""
    _, _, t = x.shape
    k = w.shape[2]
    xp = _pad_time(x, k // 2)
    y = np.empty((x.shape[0], w.shape[0], t), dtype=x.dtype)
    y[:] = b[:, None]
    for j in range(k):
        y += np.matmul(w[:, :, j], xp[:, :, j:j + t])
    return y


def conv1d_backward_numpy(dy, x, w):
    """Gradients (dx, dw, db) for conv1d_forward."""
    _, _, t = x.shape
    k = w.shape[2]
    p = k // 2
    xp = _pad_time(x, p)
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for j in range(k):
        dxp[:, :, j:j + t] += np.matmul(w[:, :, j].T, dy)
        dw[:, :, j] = np.tensordot(dy, xp[:, :, j:j + t], axes=([0, 2], [0, 2]))
    db = dy.sum(axis=(0, 2))
    dx = dxp[:, :, p:p + t] if p else dxp
    return dx, dw, db


def layer_norm_forward_numpy(x, gamma, beta, keyvec, eps):
    """Normalize x over channels at each position; returns (y, xhat, istd)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = xc * istd
    y = (gamma[None, :, None] * xhat + beta[None, :, None]) * keyvec[:, None, :]
    return y, xhat, istd[:, 0, :]


def layer_norm_backward_numpy(dy, xhat, istd, keyvec, gamma):
    """Gradients (dx, dgamma, dbeta) for layer_norm_forward."""
    dy = dy * keyvec[:, None, :]
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxhat = dy * gamma[None, :, None]
    mean_dxhat = dxhat.mean(axis=1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = istd[:, None, :] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    dx *= keyvec[:, None, :]
    return dx, dgamma, dbeta


def batch_norm_forward_train_numpy(x, gamma, beta, keyvec, eps):
    """Masked per-channel batch norm; returns (y, xhat, istd, mu, var, nv)."""
    mask = keyvec[:, None, :]
    nv = float(keyvec.sum())
    mu = (x * mask).sum(axis=(0, 2)) / nv
    xc = (x - mu[None, :, None]) * mask
    var = (xc * xc).sum(axis=(0, 2)) / nv
    istd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * istd[None, :, None]
    y = (gamma[None, :, None] * xhat + beta[None, :, None]) * mask
    return y, xhat, istd, mu.astype(x.dtype), var.astype(x.dtype), nv


def batch_norm_backward_train_numpy(dy, xhat, istd, keyvec, gamma, nv):
    """Gradients (dx, dgamma, dbeta) for batch_norm_forward_train."""
    mask = keyvec[:, None, :]
    dy = dy * mask
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxhat = dy * gamma[None, :, None]
    sum_dxhat = dxhat.sum(axis=(0, 2))
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2))
    dx = (istd[None, :, None] / nv) * (
        nv * dxhat
        - sum_dxhat[None, :, None]
        - xhat * sum_dxhat_xhat[None, :, None]
    )
    dx *= mask
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# numba path

if USE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _conv1d_forward_jit(xp, w, b, t):
        nb, nc, _ = xp.shape
        no, _, k = w.shape
        y = np.empty((nb, no, t), dtype=xp.dtype)
        for bi in range(nb):
            for o in range(no):
                row = y[bi, o]
                row[:] = b[o]
                for c in range(nc):
                    xrow = xp[bi, c]
                    for j in range(k):
                        wv = w[o, c, j]
                        for ti in range(t):
                            row[ti] += wv * xrow[ti + j]
        return y

    # fastmath lets LLVM vectorize the tap reduction; the reordered sum is
    # still deterministic for fixed shapes
    @njit(cache=True, fastmath=True)
    def _conv1d_dw_jit(dy, xp, k):
        nb, no, t = dy.shape
        nc = xp.shape[1]
        dw = np.zeros((no, nc, k), dtype=dy.dtype)
        for bi in range(nb):
            for o in range(no):
                dyrow = dy[bi, o]
                for c in range(nc):
                    xrow = xp[bi, c]
                    for j in range(k):
                        acc = dw[o, c, j]
                        for ti in range(t):
                            acc += dyrow[ti] * xrow[ti + j]
                        dw[o, c, j] = acc
        return dw

    def conv1d_forward_numba(x, w, b):
        k = w.shape[2]
        if k == 1:
            # pointwise conv is a plain matmul; BLAS beats the scalar loop
            return conv1d_forward_numpy(x, w, b)
        xp = _pad_time(x, k // 2)
        return _conv1d_forward_jit(xp, w, b, x.shape[2])

    def conv1d_backward_numba(dy, x, w):
        k = w.shape[2]
        if k == 1:
            return conv1d_backward_numpy(dy, x, w)
        p = k // 2
        t = x.shape[2]
        # dx is a correlation of dy with the transposed, tap-reversed weights,
        # so it can reuse the forward kernel instead of a scatter loop
        wt = np.ascontiguousarray(w[:, :, ::-1].transpose(1, 0, 2))
        dyp = _pad_time(dy, p)
        dx = _conv1d_forward_jit(dyp, wt, np.zeros(w.shape[1], dtype=dy.dtype), t)
        dw = _conv1d_dw_jit(dy, _pad_time(x, p), k)
        db = dy.sum(axis=(0, 2))
        return dx, dw, db

    @njit(cache=True)
    def _ln_fwd_jit(x, gamma, beta, keyvec, eps):
        nb, nc, t = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        istd = np.empty((nb, t), dtype=x.dtype)
        for bi in range(nb):
            xs = x[bi]
            kv = keyvec[bi]
            for ti in range(t):
                mu = 0.0
                for ci in range(nc):
                    mu += xs[ci, ti]
                mu /= nc
                var = 0.0
                for ci in range(nc):
                    d = xs[ci, ti] - mu
                    var += d * d
                var /= nc
                iv = 1.0 / np.sqrt(var + eps)
                istd[bi, ti] = iv
                mv = kv[ti]
                for ci in range(nc):
                    xh = (xs[ci, ti] - mu) * iv
                    xhat[bi, ci, ti] = xh
                    y[bi, ci, ti] = (gamma[ci] * xh + beta[ci]) * mv
        return y, xhat, istd

    @njit(cache=True)
    def _ln_bwd_jit(dy, xhat, istd, keyvec, gamma):
        nb, nc, t = dy.shape
        dx = np.empty_like(dy)
        dgamma = np.zeros(nc, dtype=np.float64)
        dbeta = np.zeros(nc, dtype=np.float64)
        for bi in range(nb):
            kv = keyvec[bi]
            for ti in range(t):
                mv = kv[ti]
                s1 = 0.0
                s2 = 0.0
                for ci in range(nc):
                    g = dy[bi, ci, ti] * mv
                    xh = xhat[bi, ci, ti]
                    dgamma[ci] += g * xh
                    dbeta[ci] += g
                    dxh = g * gamma[ci]
                    s1 += dxh
                    s2 += dxh * xh
                s1 /= nc
                s2 /= nc
                iv = istd[bi, ti]
                for ci in range(nc):
                    g = dy[bi, ci, ti] * mv
                    dx[bi, ci, ti] = iv * (g * gamma[ci] - s1 - xhat[bi, ci, ti] * s2) * mv
        return dx, dgamma, dbeta

    @njit(cache=True)
    def _bn_fwd_jit(x, gamma, beta, keyvec, eps):
        nb, nc, t = x.shape
        nv = 0.0
        for bi in range(nb):
            for ti in range(t):
                nv += keyvec[bi, ti]
        mu = np.zeros(nc, dtype=np.float64)
        var = np.zeros(nc, dtype=np.float64)
        for bi in range(nb):
            kv = keyvec[bi]
            for ci in range(nc):
                row = x[bi, ci]
                acc = 0.0
                for ti in range(t):
                    acc += row[ti] * kv[ti]
                mu[ci] += acc
        for ci in range(nc):
            mu[ci] /= nv
        for bi in range(nb):
            kv = keyvec[bi]
            for ci in range(nc):
                row = x[bi, ci]
                m = mu[ci]
                acc = 0.0
                for ti in range(t):
                    d = (row[ti] - m) * kv[ti]
                    acc += d * d
                var[ci] += acc
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        istd = np.empty(nc, dtype=x.dtype)
        mu_out = np.empty(nc, dtype=x.dtype)
        var_out = np.empty(nc, dtype=x.dtype)
        for ci in range(nc):
            var[ci] /= nv
            istd[ci] = 1.0 / np.sqrt(var[ci] + eps)
            mu_out[ci] = mu[ci]
            var_out[ci] = var[ci]
        for bi in range(nb):
            kv = keyvec[bi]
            for ci in range(nc):
                row = x[bi, ci]
                g = gamma[ci]
                be = beta[ci]
                m = mu[ci]
                iv = istd[ci]
                for ti in range(t):
                    xh = (row[ti] - m) * iv * kv[ti]
                    xhat[bi, ci, ti] = xh
                    y[bi, ci, ti] = (g * xh + be) * kv[ti]
        return y, xhat, istd, mu_out, var_out, nv

    @njit(cache=True)
    def _bn_bwd_jit(dy, xhat, istd, keyvec, gamma, nv):
        nb, nc, t = dy.shape
        dgamma = np.zeros(nc, dtype=np.float64)
        dbeta = np.zeros(nc, dtype=np.float64)
        for bi in range(nb):
            kv = keyvec[bi]
            for ci in range(nc):
                dyr = dy[bi, ci]
                xhr = xhat[bi, ci]
                accg = 0.0
                accb = 0.0
                for ti in range(t):
                    g = dyr[ti] * kv[ti]
                    accg += g * xhr[ti]
                    accb += g
                dgamma[ci] += accg
                dbeta[ci] += accb
        dx = np.empty_like(dy)
        for bi in range(nb):
            kv = keyvec[bi]
            for ci in range(nc):
                dyr = dy[bi, ci]
                xhr = xhat[bi, ci]
                gm = gamma[ci]
                iv = istd[ci]
                # sums of dxhat reuse the parameter grads: dxhat = gamma * dy_masked
                s1 = dbeta[ci] * gm
                s2 = dgamma[ci] * gm
                c1 = iv / nv
                for ti in range(t):
                    g = dyr[ti] * kv[ti]
                    dx[bi, ci, ti] = c1 * (nv * g * gm - s1 - xhr[ti] * s2) * kv[ti]
        return dx, dgamma, dbeta

    def layer_norm_forward_numba(x, gamma, beta, keyvec, eps):
        return _ln_fwd_jit(x, gamma, beta, keyvec, eps)

    def layer_norm_backward_numba(dy, xhat, istd, keyvec, gamma):
        return _ln_bwd_jit(dy, xhat, istd, keyvec, gamma)

    def batch_norm_forward_train_numba(x, gamma, beta, keyvec, eps):
        return _bn_fwd_jit(x, gamma, beta, keyvec, eps)

    def batch_norm_backward_train_numba(dy, xhat, istd, keyvec, gamma, nv):
        return _bn_bwd_jit(dy, xhat, istd, keyvec, gamma, nv)

    conv1d_forward = conv1d_forward_numba
    conv1d_backward = conv1d_backward_numba
    layer_norm_forward = layer_norm_forward_numba
    layer_norm_backward = layer_norm_backward_numba
    batch_norm_forward_train = batch_norm_forward_train_numba
    batch_norm_backward_train = batch_norm_backward_train_numba
else:
    conv1d_forward_numba = None
    conv1d_backward_numba = None
    layer_norm_forward_numba = None
    layer_norm_backward_numba = None
    batch_norm_forward_train_numba = None
    batch_norm_backward_train_numba = None
    conv1d_forward = conv1d_forward_numpy
    conv1d_backward = conv1d_backward_numpy
    layer_norm_forward = layer_norm_forward_numpy
    layer_norm_backward = layer_norm_backward_numpy
    batch_norm_forward_train = batch_norm_forward_train_numpy
    batch_norm_backward_train = batch_norm_backward_train_numpy


def warmup():
    """Trigger JIT compilation so benchmarks and timed runs start hot."""
    for dtype in (np.float64, np.float32):
        x = np.zeros((1, 2, 8), dtype=dtype)
        kv = np.ones((1, 8), dtype=dtype)
        two = np.ones(2, dtype=dtype)
        for k in (1, 3, 5):
            w = np.zeros((2, 2, k), dtype=dtype)
            y = conv1d_forward(x, w, np.zeros(2, dtype=dtype))
            conv1d_backward(y, x, w)
        y, xhat, istd = layer_norm_forward(x, two, two, kv, 1e-5)
        layer_norm_backward(y, xhat, istd, kv, two)
        y, xhat, istd, mu, var, nv = batch_norm_forward_train(x, two, two, kv, 1e-5)
        batch_norm_backward_train(y, xhat, istd, kv, two, nv)
