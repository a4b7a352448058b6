"""SoftPool, the cross-modal attention fusion (CMAF) block, and MHSAF.

Sequences are ``[B, S, d]`` with ``S = h * w`` positions of a row-major
spatial grid, so pooling can recover the 2D layout.
"""
from __future__ import annotations

import csv

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .encoders import ConfigError
from .nn import Linear, Module
from .tensor import DimensionError, Tensor, _make


def softpool(x, grid, kernel=2, stride=2):
    """Softmax-weighted pooling of ``[..., S, d]`` viewed as ``[..., h, w, d]``.

    Each output is ``sum_i softmax(a)_i * a_i`` over a ``kernel x kernel`` region,
    per channel. Returns ``[..., S', d]`` with ``S' = h' * w'``.
    """
    h, w = grid
    if kernel < 1 or stride < 1:
        raise ConfigError("kernel and stride must be >= 1")
    if kernel > h or kernel > w:
        raise ConfigError(f"pool kernel {kernel} exceeds grid {h}x{w}")
    if (h - kernel) % stride or (w - kernel) % stride:
        raise ConfigError(f"grid {h}x{w} incompatible with kernel {kernel}, stride {stride}")
    lead = x.shape[:-2]
    d = x.shape[-1]
    if x.shape[-2] != h * w:
        raise DimensionError(f"sequence length {x.shape[-2]} != grid {h}x{w}")
    a = x.data.reshape(lead + (h, w, d))
    n = len(lead)
    win = sliding_window_view(a, (kernel, kernel), axis=(n, n + 1))[..., ::stride, ::stride, :, :, :]
    # win: [..., h', w', d, k, k]
    ho, wo = win.shape[n], win.shape[n + 1]
    z = win - win.max(axis=(-2, -1), keepdims=True)
    e = np.exp(z)
    wts = e / e.sum(axis=(-2, -1), keepdims=True)
    y = (wts * win).sum(axis=(-2, -1))
    out = y.reshape(lead + (ho * wo, d))

    def bw(g):
        g = g.reshape(lead + (ho, wo, d))
        local = wts * (1.0 + win - y[..., None, None]) * g[..., None, None]
        full = np.zeros(lead + (h, w, d))
        for i in range(kernel):
            for j in range(kernel):
                idx = (Ellipsis, slice(i, i + stride * ho, stride), slice(j, j + stride * wo, stride), slice(None))
                full[idx] += local[..., i, j]
        return (full.reshape(x.shape),)
    return _make(out, (x,), bw)


def pooled_grid(grid, kernel=2, stride=2):
    h, w = grid
    return ((h - kernel) // stride + 1, (w - kernel) // stride + 1)


def grid_to_sequence(u):
    """``[B, C, H, W] -> [B, H*W, C]``."""
    B, C, H, W = u.shape
    return u.reshape((B, C, H * W)).transpose((0, 2, 1))


class CMAF(Module):
    """Cross-modal attention fusion of a vision and a text sequence."""

    def __init__(self, channels, grid, rng, gamma_init=1.0, pool=2):
        super().__init__()
        if channels % 2:
            raise ConfigError("CMAF channel count must be even")
        d = channels // 2
        self.grid, self.pool, self.d = tuple(grid), pool, d
        if grid[0] % pool or grid[1] % pool:
            raise ConfigError(f"grid {grid} not divisible by pool stride {pool}")
        self.entry_v = self.child("entry_v", Linear(channels, d, rng))
        self.entry_t = self.child("entry_t", Linear(channels, d, rng))
        for name in ("q1", "k1", "v1", "q2", "k2", "v2"):
            self.child(name, Linear(d, d, rng, bias=False))
        self.out_v = self.child("out_v", Linear(d, d, rng))
        self.out_w = self.child("out_w", Linear(d, d, rng))
        self.gamma1 = self.param("gamma1", np.array(gamma_init))
        self.gamma2 = self.param("gamma2", np.array(gamma_init))

    @property
    def out_grid(self):
        return pooled_grid(self.grid, self.pool, self.pool)

    def matching_degrees(self, x, y):
        """Return (beta, rho), each ``[B, S, S]`` indexed ``[j, i]``.

        ``beta[j, i]`` is softmax over vision positions ``i`` of
        ``(Q1 x_i) . (K2 y_j)``; ``rho[j, i]`` is softmax over text positions
        ``i`` of ``(Q2 y_i) . (K1 x_j)``.
        """
        if x.shape != y.shape:
            raise DimensionError(f"matching_degrees needs equal shapes, got {x.shape} and {y.shape}")
        c = self.children
        q1, k1 = c["q1"](x), c["k1"](x)
        q2, k2 = c["q2"](y), c["k2"](y)
        beta = T.softmax(k2 @ q1.T, axis=-1)
        rho = T.softmax(k1 @ q2.T, axis=-1)
        return beta, rho

    def _attend(self, x, y):
        # same maps as matching_degrees, fused with the value aggregation
        c = self.children
        o_x, beta = T.attend(c["k2"](y), c["q1"](x), c["v1"](x))
        o_y, rho = T.attend(c["k1"](x), c["q2"](y), c["v2"](y))
        return o_x, o_y, beta, rho

    def __call__(self, v_seq, t_seq, return_maps=False):
        c = self.children
        x = c["entry_v"](v_seq)
        y = c["entry_t"](t_seq)
        if x.shape != y.shape:
            raise DimensionError(f"CMAF branches differ in shape: {x.shape} vs {y.shape}")
        o_x, o_y, beta, rho = self._attend(x, y)
        k = self.pool
        sx = softpool(o_x, self.grid, k, k) + softpool(x, self.grid, k, k)
        sy = softpool(o_y, self.grid, k, k) + softpool(y, self.grid, k, k)
        o_v = T.softmax(c["out_v"](sx), axis=-1)
        o_w = T.softmax(c["out_w"](sy), axis=-1)
        f = T.concat([o_v * self.gamma1, o_w * self.gamma2], axis=-1)
        if return_maps:
            return f, (beta, rho)
        return f


def matching_degrees(x, y, params: CMAF):
    return params.matching_degrees(x, y)


class MHSAF(Module):
    """Multi-head scaled dot-product self-attention with residual output."""

    def __init__(self, channels, heads, rng):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"{channels} channels not divisible by {heads} heads")
        self.channels, self.heads = channels, heads
        self.dh = channels // heads
        for name in ("wq", "wk", "wv", "wo"):
            self.child(name, Linear(channels, channels, rng, bias=False))

    def _split(self, z):
        B, S, _ = z.shape
        return z.reshape((B, S, self.heads, self.dh)).transpose((0, 2, 1, 3))

    def __call__(self, f, return_maps=False):
        c = self.children
        B, S, C = f.shape
        q, k, v = self._split(c["wq"](f)), self._split(c["wk"](f)), self._split(c["wv"](f))
        H = self.heads
        flat = (B * H, S, self.dh)
        o, att = T.attend(q.reshape(flat), k.reshape(flat), v.reshape(flat), 1.0 / np.sqrt(self.dh))
        att = att.reshape((B, H, S, S))
        heads = o.reshape((B, H, S, self.dh)).transpose((0, 2, 1, 3)).reshape((B, S, C))
        out = f + c["wo"](heads)
        if return_maps:
            return out, att
        return out


def export_attention_csv(beta, rho, path, sample=0):
    """Write ``j,i,beta,rho`` rows for one sample."""
    b = beta.data if isinstance(beta, Tensor) else np.asarray(beta)
    r = rho.data if isinstance(rho, Tensor) else np.asarray(rho)
    if b.ndim == 3:
        b, r = b[sample], r[sample]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["j", "i", "beta", "rho"])
        for j in range(b.shape[0]):
            for i in range(b.shape[1]):
                wr.writerow([j, i, repr(float(b[j, i])), repr(float(r[j, i]))])
