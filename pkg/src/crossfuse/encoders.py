"""Desk-scale text/vision encoders and the shape-unifying TRT/VRT blocks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import Linear, Module
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class TextSequence:
    token_ids: list
    vocab_size: int
    pad_mask: list = field(default=None)

    def __post_init__(self):
        ids = np.asarray(self.token_ids, dtype=np.int64)
        if self.pad_mask is None:
            self.pad_mask = [False] * len(ids)
        if len(self.pad_mask) != len(ids):
            raise ValueError("pad_mask length must equal sequence length")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ValueError(f"token id outside [0, {self.vocab_size})")


@dataclass
class Volume:
    values: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"volume must be 3D with positive extents, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("volume contains non-finite values")


def _as_batch_ids(ids):
    ids = np.asarray(ids, dtype=np.int64)
    return ids[None] if ids.ndim == 1 else ids


class TextEncoder(Module):
    """Token + learned position embedding, one residual self-attention layer.

    Padded positions are excluded as attention keys and zeroed in the output.
    """

    def __init__(self, vocab_size, seq_len, dim, rng):
        super().__init__()
        self.vocab_size, self.seq_len, self.dim = vocab_size, seq_len, dim
        # unit-norm-scale embeddings keep Gram entries O(1)
        self.embed = self.param("embed", rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab_size, dim)))
        self.pos = self.param("pos", rng.normal(0.0, 0.1, size=(seq_len, dim)))
        s = 1.0 / np.sqrt(dim)
        self.wq = self.param("wq", rng.normal(0.0, s, size=(dim, dim)))
        self.wk = self.param("wk", rng.normal(0.0, s, size=(dim, dim)))
        self.wv = self.param("wv", rng.normal(0.0, s, size=(dim, dim)))
        self.wo = self.param("wo", rng.normal(0.0, s, size=(dim, dim)))
        self.mlm_head = self.child("mlm_head", Linear(dim, vocab_size, rng))

    def __call__(self, token_ids, pad_mask):
        ids = _as_batch_ids(token_ids)
        pad = np.asarray(pad_mask, dtype=bool).reshape(ids.shape)
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError(f"token id outside [0, {self.vocab_size})")
        S = ids.shape[1]
        if S != self.seq_len:
            raise ConfigError(f"sequence length {S} != configured {self.seq_len}")
        h = T.take_rows(self.embed, ids) + self.pos
        q, k, v = h @ self.wq, h @ self.wk, h @ self.wv
        scores = (q @ k.T) * (1.0 / np.sqrt(self.dim))
        scores = scores + np.where(pad, -1e9, 0.0)[:, None, :]
        att = T.softmax(scores, axis=-1)
        out = h + (att @ v) @ self.wo
        return out * (~pad)[:, :, None].astype(np.float64)

    def mlm_logits(self, token_ids, pad_mask):
        return self.mlm_head(self(token_ids, pad_mask))


def encode_text(seq: TextSequence, encoder: TextEncoder) -> Tensor:
    """Single-sequence convenience wrapper returning ``[S_t, D_t]``."""
    if seq.vocab_size != encoder.vocab_size:
        raise ConfigError("sequence vocabulary does not match encoder")
    return encoder(seq.token_ids, seq.pad_mask)[0]


def pooled_text(f_t, pad_mask):
    """Mean over non-pad tokens: ``[B, S, D] -> [B, D]``."""
    keep = (~np.asarray(pad_mask, dtype=bool)).astype(np.float64)
    keep = keep.reshape(f_t.shape[0], -1)
    counts = np.maximum(keep.sum(axis=1, keepdims=True), 1.0)
    return (f_t * keep[:, :, None]).sum(axis=1) * (1.0 / counts)


class VisionEncoder(Module):
    """Stacked stride-2 valid conv3 stages with ReLU, then global average pool."""

    def __init__(self, extents=(32, 32, 32), channels=(4, 8, 16), kernel=3, stride=2,
                 rng=None, bias=True, relu=True):
        super().__init__()
        self.extents = tuple(extents)
        self.channels = tuple(channels)
        self.kernel, self.stride = kernel, stride
        self.use_relu = relu
        self.kernels, self.biases = [], []
        c_in = 1
        for i, c_out in enumerate(channels):
            fan_in = c_in * kernel ** 3
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel, kernel))
            self.kernels.append(self.param(f"conv{i}", w))
            self.biases.append(self.param(f"bias{i}", np.zeros(c_out)) if bias else None)
            c_in = c_out
        self.out_dim = channels[-1]

    def features(self, volumes):
        """Return (pooled ``[B, D_v]``, last conv activation ``[B, C, d, h, w]``)."""
        x = volumes if isinstance(volumes, Tensor) else Tensor(volumes)
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
        if tuple(x.shape[1:]) != self.extents:
            raise ConfigError(f"volume extents {x.shape[1:]} != configured {self.extents}")
        h = x.reshape((x.shape[0], 1) + self.extents)
        for w, b in zip(self.kernels, self.biases):
            h = T.conv3(h, w, self.stride)
            if b is not None:
                h = h + b.reshape((1, -1, 1, 1, 1))
            if self.use_relu:
                h = T.relu(h)
        pooled = h.mean(axis=(2, 3, 4))
        return pooled, h

    def __call__(self, volumes):
        return self.features(volumes)[0]


def encode_vision(vol: Volume, encoder: VisionEncoder) -> Tensor:
    return encoder(vol.values)[0]


class TRT(Module):
    """Gram matrix of token features, flattened, FC, reshaped to the unified grid."""

    def __init__(self, seq_len, unified=(8, 16, 16), rng=None, bias=True):
        super().__init__()
        self.unified = tuple(unified)
        self.fc = self.child("fc", Linear(seq_len * seq_len, int(np.prod(unified)), rng, bias=bias))

    @staticmethod
    def gram(f_t):
        return f_t @ f_t.T

    def __call__(self, f_t):
        batched = f_t.ndim == 3
        if not batched:
            f_t = f_t.reshape((1,) + f_t.shape)
        g = self.gram(f_t)
        if not np.isfinite(g.data).all():
            raise FloatingPointError("non-finite Gram matrix in TRT")
        B, S = g.shape[0], g.shape[1]
        out = self.fc(g.reshape((B, S * S))).reshape((B,) + self.unified)
        return out if batched else out[0]


class VRT(Module):
    """FC to a seed grid 1/16 of the unified extent, then four x2 nearest upsamplings."""

    n_up = 4

    def __init__(self, in_dim, unified=(8, 16, 16), rng=None, bias=True):
        super().__init__()
        C, H, W = unified
        f = 2 ** self.n_up
        if H % f or W % f:
            raise ConfigError(f"unified extents {H}x{W} must be divisible by {f}")
        self.unified = tuple(unified)
        self.in_dim = in_dim
        self.seed = (C, H // f, W // f)
        self.fc = self.child("fc", Linear(in_dim, int(np.prod(self.seed)), rng, bias=bias))

    def __call__(self, f_v):
        batched = f_v.ndim == 2
        if not batched:
            f_v = f_v.reshape((1,) + f_v.shape)
        if f_v.shape[-1] != self.in_dim:
            raise ConfigError(f"vision feature dim {f_v.shape[-1]} != {self.in_dim}")
        g = self.fc(f_v).reshape((f_v.shape[0],) + self.seed)
        for _ in range(self.n_up):
            g = T.upsample_nearest(g, 2)
        return g if batched else g[0]
