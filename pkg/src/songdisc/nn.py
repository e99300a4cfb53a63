"""Minimal layer library with hand-written backward passes.

Layers work on [batch, channels, time] arrays in a single float dtype chosen
at construction (float64 for exactness, float32 for speed). Variable-length
batches carry a float mask [B, 1, T] (1 valid, 0 padded) plus an int lengths
vector; every layer zeroes its output at padded positions, so a masked batch
forward matches a per-sample forward and no gradient ever flows from padding.

Each layer caches what its backward needs on forward; backward consumes the
cache, accumulates parameter gradients and returns the input gradient.
"""

import numpy as np

from . import kernels
from .kernels import conv1d_backward, conv1d_forward


class Param:
    """A trainable array and its gradient accumulator."""

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return self.value.size


def make_mask(lengths: np.ndarray, t: int, dtype=np.float64) -> np.ndarray:
    """Float mask [B, 1, t] with ones at positions < length."""
    pos = np.arange(t)
    return (pos[None, :] < np.asarray(lengths)[:, None]).astype(dtype)[:, None, :]


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int,
                   dtype=np.float64) -> np.ndarray:
    # draw in float64 then cast, so every dtype sees the same random stream
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv1d:
    """Same-padding stride-1 conv over time. zero_init marks posterior heads."""

    def __init__(self, cin, cout, k, rng=None, zero_init=False, dtype=np.float64):
        if zero_init:
            w = np.zeros((cout, cin, k), dtype=dtype)
        else:
            w = fan_in_uniform(rng, (cout, cin, k), cin * k, dtype)
        self.w = Param(w)
        self.b = Param(np.zeros(cout, dtype=dtype))
        self._cache = None

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def forward(self, x, mask):
        xm = x * mask
        y = conv1d_forward(xm, self.w.value, self.b.value) * mask
        self._cache = (xm, mask)
        return y

    def backward(self, dy):
        x, mask = self._cache
        dy = dy * mask
        dx, dw, db = conv1d_backward(dy, x, self.w.value)
        self.w.grad += dw
        self.b.grad += db
        return dx * mask


class Linear:
    def __init__(self, nin, nout, rng=None, zero_init=False, dtype=np.float64):
        if zero_init:
            w = np.zeros((nout, nin), dtype=dtype)
        else:
            w = fan_in_uniform(rng, (nout, nin), nin, dtype)
        self.w = Param(w)
        self.b = Param(np.zeros(nout, dtype=dtype))
        self._cache = None

    def params(self):
        return [("w", self.w), ("b", self.b)]

    def forward(self, x):
        self._cache = x
        return x @ self.w.value.T + self.b.value

    def backward(self, dy):
        x = self._cache
        self.w.grad += dy.T @ x
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.value


class ReLU:
    def __init__(self):
        self._keep = None

    def params(self):
        return []

    def forward(self, x):
        self._keep = x > 0
        return np.where(self._keep, x, 0.0)

    def backward(self, dy):
        return np.where(self._keep, dy, 0.0)


class BatchNorm1d:
    """Per-channel batch norm with masked statistics over (batch, valid time)."""

    def __init__(self, c, momentum=0.1, eps=1e-5, dtype=np.float64):
        self.gamma = Param(np.ones(c, dtype=dtype))
        self.beta = Param(np.zeros(c, dtype=dtype))
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def set_buffers(self, mean, var):
        dtype = self.running_mean.dtype
        self.running_mean = np.asarray(mean, dtype=dtype).copy()
        self.running_var = np.asarray(var, dtype=dtype).copy()

    def forward(self, x, mask, training, update_stats=True):
        if training:
            y, xhat, istd, mu, var, nv = kernels.batch_norm_forward_train(
                x, self.gamma.value, self.beta.value, mask[:, 0, :], self.eps)
            if update_stats:
                m = self.momentum
                self.running_mean = (1 - m) * self.running_mean + m * mu
                self.running_var = (1 - m) * self.running_var + m * var
            self._cache = (xhat, istd, mask, nv, True)
            return y
        mu = self.running_mean
        var = self.running_var
        xc = (x - mu[None, :, None]) * mask
        istd = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * istd[None, :, None]
        y = (self.gamma.value[None, :, None] * xhat + self.beta.value[None, :, None]) * mask
        self._cache = (xhat, istd, mask, None, False)
        return y

    def backward(self, dy):
        xhat, istd, mask, nv, training = self._cache
        if training:
            dx, dgamma, dbeta = kernels.batch_norm_backward_train(
                dy, xhat, istd, mask[:, 0, :], self.gamma.value, nv)
            self.gamma.grad += dgamma
            self.beta.grad += dbeta
            return dx
        dy = dy * mask
        self.gamma.grad += (dy * xhat).sum(axis=(0, 2))
        self.beta.grad += dy.sum(axis=(0, 2))
        dxhat = dy * self.gamma.value[None, :, None]
        return dxhat * istd[None, :, None] * mask


class LayerNorm:
    """Channel-wise layer norm applied independently at every time position."""

    def __init__(self, c, eps=1e-5, dtype=np.float64):
        self.gamma = Param(np.ones(c, dtype=dtype))
        self.beta = Param(np.zeros(c, dtype=dtype))
        self.eps = eps
        self._cache = None

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def forward(self, x, mask):
        keyvec = mask[:, 0, :]
        y, xhat, istd = kernels.layer_norm_forward(
            x, self.gamma.value, self.beta.value, keyvec, self.eps)
        self._cache = (xhat, istd, keyvec)
        return y

    def backward(self, dy):
        xhat, istd, keyvec = self._cache
        dx, dgamma, dbeta = kernels.layer_norm_backward(
            dy, xhat, istd, keyvec, self.gamma.value)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        return dx


class AvgPool2:
    """Masked average pooling over time with window 2.

    The last window of an odd-length song averages its single valid frame, so
    pooled values depend only on the song itself, never on batch padding.
    """

    def params(self):
        return []

    def forward(self, x, mask, lengths):
        b, c, t = x.shape
        t2 = (t + 1) // 2
        xm = x * mask
        if t % 2:
            xe = np.concatenate([xm, np.zeros((b, c, 1), dtype=x.dtype)], axis=2)
        else:
            xe = xm
        s = xe.reshape(b, c, t2, 2).sum(axis=3)
        counts = np.clip(lengths[:, None] - 2 * np.arange(t2)[None, :], 0, 2).astype(x.dtype)
        denom = np.maximum(counts, 1.0)
        y = s / denom[:, None, :] * (counts > 0)[:, None, :]
        new_lengths = (lengths + 1) // 2
        new_mask = make_mask(new_lengths, t2, x.dtype)
        self._cache = (t, denom, counts, lengths)
        return y, new_mask, new_lengths

    def backward(self, dy):
        t, denom, counts, lengths = self._cache
        g = dy / denom[:, None, :] * (counts > 0)[:, None, :]
        dxe = np.repeat(g, 2, axis=2)
        valid = make_mask(lengths, dxe.shape[2], dy.dtype)
        return (dxe * valid)[:, :, :t]


class SelfAttention:
    """Multi-head self-attention over time with padded keys masked out."""

    def __init__(self, c, heads, rng, dtype=np.float64):
        if c % heads:
            raise ValueError("channel count must divide evenly into heads")
        self.heads = heads
        self.dh = c // heads
        # query/key/value projections packed into one matrix so the whole
        # input projection is a single matmul
        self.wqkv = Param(fan_in_uniform(rng, (3 * c, c), c, dtype))
        self.wo = Param(fan_in_uniform(rng, (c, c), c, dtype))
        self.bqkv = Param(np.zeros(3 * c, dtype=dtype))
        self.bo = Param(np.zeros(c, dtype=dtype))
        self._cache = None

    def params(self):
        return [("wqkv", self.wqkv), ("wo", self.wo),
                ("bqkv", self.bqkv), ("bo", self.bo)]

    def _split(self, z, b, t):
        return z.reshape(b, self.heads, self.dh, t)

    def forward(self, x, mask):
        b, c, t = x.shape
        scale = 1.0 / np.sqrt(self.dh)
        qkv = np.matmul(self.wqkv.value, x)
        qkv += self.bqkv.value[:, None]
        # scale folded into q so the [B,H,T,T] score array needs no extra pass
        q = qkv[:, :c] * scale
        v = qkv[:, 2 * c:] * mask
        qh = self._split(q, b, t)
        kh = qkv[:, c:2 * c].reshape(b, self.heads, self.dh, t)
        vh = self._split(v, b, t)
        scores = np.matmul(qh.transpose(0, 1, 3, 2), kh)
        keyvec = mask[:, 0, :]
        scores += ((1.0 - keyvec) * -1e30)[:, None, None, :]
        m = scores.max(axis=3, keepdims=True)
        np.subtract(scores, m, out=scores)
        np.exp(scores, out=scores)
        denom = scores.sum(axis=3, keepdims=True)
        np.divide(scores, denom, out=scores)
        attn = scores
        oh = np.matmul(vh, attn.transpose(0, 1, 3, 2))
        o = oh.reshape(b, c, t)
        y = (np.matmul(self.wo.value, o) + self.bo.value[:, None]) * mask
        self._cache = (x, mask, qh, kh, vh, attn, o, scale)
        return y

    def backward(self, dy):
        x, mask, qh, kh, vh, attn, o, scale = self._cache
        b, c, t = x.shape
        dy = dy * mask
        self.wo.grad += np.tensordot(dy, o, axes=([0, 2], [0, 2]))
        self.bo.grad += dy.sum(axis=(0, 2))
        do = np.matmul(self.wo.value.T, dy)
        doh = self._split(do, b, t)
        dattn = np.matmul(doh.transpose(0, 1, 3, 2), vh)
        dvh = np.matmul(doh, attn)
        row = (attn * dattn).sum(axis=3, keepdims=True)
        np.subtract(dattn, row, out=dattn)
        np.multiply(attn, dattn, out=dattn)
        ds = dattn
        dqh = np.matmul(kh, ds.transpose(0, 1, 3, 2))
        dkh = np.matmul(qh, ds)
        dqkv = np.empty((b, 3 * c, t), dtype=x.dtype)
        np.multiply(dqh.reshape(b, c, t), scale, out=dqkv[:, :c])
        dqkv[:, c:2 * c] = dkh.reshape(b, c, t)
        np.multiply(dvh.reshape(b, c, t), mask, out=dqkv[:, 2 * c:])
        self.wqkv.grad += np.tensordot(dqkv, x, axes=([0, 2], [0, 2]))
        self.bqkv.grad += dqkv.sum(axis=(0, 2))
        dx = np.matmul(self.wqkv.value.T, dqkv)
        return dx * mask


class AttentionBlock:
    """Post-norm residual wrap: LN(x + attention(x))."""

    def __init__(self, c, heads, rng, dtype=np.float64):
        self.attn = SelfAttention(c, heads, rng, dtype)
        self.norm = LayerNorm(c, dtype=dtype)

    def params(self):
        out = [("attn." + n, p) for n, p in self.attn.params()]
        out += [("norm." + n, p) for n, p in self.norm.params()]
        return out

    def forward(self, x, mask):
        y = self.attn.forward(x, mask)
        return self.norm.forward(x + y, mask)

    def backward(self, dy):
        ds = self.norm.backward(dy)
        dx = self.attn.backward(ds)
        return dx + ds


_PE_CACHE: dict = {}


def positional_encoding(c: int, t: int, dtype=np.float64) -> np.ndarray:
    """Fixed sinusoidal table [c, t]; cached per shape and dtype."""
    key = (c, t, np.dtype(dtype).str)
    if key not in _PE_CACHE:
        pos = np.arange(t, dtype=np.float64)
        idx = np.arange(0, c, 2, dtype=np.float64)
        freq = 1.0 / np.power(10000.0, idx / c)
        ang = pos[None, :] * freq[:, None]
        pe = np.zeros((c, t))
        pe[0::2, :] = np.sin(ang)
        pe[1::2, :] = np.cos(ang)
        _PE_CACHE[key] = pe.astype(dtype)
    return _PE_CACHE[key]


class MaskedMeanPool:
    """Average over valid time frames: [B,C,T] -> [B,C]."""

    def params(self):
        return []

    def forward(self, x, mask, lengths):
        lf = lengths.astype(x.dtype)
        self._cache = (mask, lf, x.shape[2])
        return (x * mask).sum(axis=2) / lf[:, None]

    def backward(self, dy):
        mask, lf, t = self._cache
        return dy[:, :, None] / lf[:, None, None] * mask


class ClampLogVar:
    """Hard clamp keeping exp() finite; gradient passes strictly inside."""

    def __init__(self, bound=10.0):
        self.bound = bound
        self._keep = None

    def params(self):
        return []

    def forward(self, x):
        self._keep = np.abs(x) < self.bound
        return np.clip(x, -self.bound, self.bound)

    def backward(self, dy):
        return np.where(self._keep, dy, 0.0)
