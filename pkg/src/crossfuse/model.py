"""Full network: encoders -> TRT/VRT -> fusion topology -> dense classifier head."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .encoders import TRT, VRT, ConfigError, TextEncoder, VisionEncoder, pooled_text
from .fusion import CMAF, MHSAF, grid_to_sequence, pooled_grid, softpool
from .nn import Linear, Module

MODES = ("fused", "text-only", "vision-only")
TOPOLOGIES = ("self", "cross", "self-self", "cross-cross", "self-cross", "cross-self")


@dataclass
class ModelConfig:
    vocab_size: int = 40
    seq_len: int = 16
    text_dim: int = 16
    extents: tuple = (32, 32, 32)
    channels: tuple = (4, 8, 16)
    unified: tuple = (8, 16, 16)
    heads: int = 4
    head_width: int = 64
    pool: int = 2
    mode: str = "fused"
    topology: str = "cross-self"

    def __post_init__(self):
        self.extents = tuple(self.extents)
        self.channels = tuple(self.channels)
        self.unified = tuple(self.unified)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"topology must be one of {TOPOLOGIES}")

    def to_dict(self):
        d = asdict(self)
        for k in ("extents", "channels", "unified"):
            d[k] = list(d[k])
        return d


class DenseHead(Module):
    """Two densely connected stages: each stage sees the input and all earlier outputs."""

    def __init__(self, n_in, width, rng, n_out=2):
        super().__init__()
        self.s1 = self.child("s1", Linear(n_in, width, rng))
        self.s2 = self.child("s2", Linear(n_in + width, width, rng))
        self.out = self.child("out", Linear(n_in + 2 * width, n_out, rng))

    def __call__(self, x):
        h1 = T.relu(self.s1(x))
        z1 = T.concat([x, h1], axis=-1)
        h2 = T.relu(self.s2(z1))
        return self.out(T.concat([z1, h2], axis=-1))


class FusionNet(Module):
    def __init__(self, cfg: ModelConfig, seed=0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        C, H, W = cfg.unified
        grid = (H, W)
        self.uses_text = cfg.mode in ("fused", "text-only")
        self.uses_vision = cfg.mode in ("fused", "vision-only")
        # both encoders always exist so checkpoints share a layout
        self.text = self.child("text", TextEncoder(cfg.vocab_size, cfg.seq_len, cfg.text_dim, rng))
        self.vision = self.child("vision", VisionEncoder(cfg.extents, cfg.channels, rng=rng))
        self.trt = self.child("trt", TRT(cfg.seq_len, cfg.unified, rng))
        self.vrt = self.child("vrt", VRT(self.vision.out_dim, cfg.unified, rng))
        pg = pooled_grid(grid, cfg.pool, cfg.pool)
        self.blocks = []
        if cfg.mode != "fused":
            self.blocks.append(("self", self.child("mhsaf0", MHSAF(C, cfg.heads, rng))))
            n_out = pg[0] * pg[1] * C
        else:
            stages = cfg.topology.split("-")
            if stages[0] == "self" and len(stages) == 2 and stages[1] == "cross":
                self.child("pre_v", MHSAF(C, cfg.heads, rng))
                self.child("pre_t", MHSAF(C, cfg.heads, rng))
                self.child("cmaf0", CMAF(C, grid, rng, pool=cfg.pool))
                n_out = pg[0] * pg[1] * C
            elif stages[0] == "self":
                self.child("mix", Linear(2 * C, C, rng))
                for i in range(len(stages)):
                    self.child(f"mhsaf{i}", MHSAF(C, cfg.heads, rng))
                n_out = pg[0] * pg[1] * C
            else:
                self.child("cmaf0", CMAF(C, grid, rng, pool=cfg.pool))
                n_out = pg[0] * pg[1] * C
                if len(stages) == 2 and stages[1] == "cross":
                    self.child("cmaf1", CMAF(C // 2, pg, rng, pool=cfg.pool))
                    pg2 = pooled_grid(pg, cfg.pool, cfg.pool)
                    n_out = pg2[0] * pg2[1] * (C // 2)
                elif len(stages) == 2:
                    self.child("mhsaf0", MHSAF(C, cfg.heads, rng))
        self.head = self.child("head", DenseHead(n_out, cfg.head_width, rng))

    # ------------------------------------------------------------------
    def encode(self, volumes, token_ids, pad_mask):
        out = {}
        if self.uses_text:
            f_t = self.text(token_ids, pad_mask)
            out["f_t_seq"] = f_t
            out["f_t"] = pooled_text(f_t, pad_mask)
            out["t_tilde"] = self.trt(f_t)
        if self.uses_vision:
            f_v, act = self.vision.features(volumes)
            out["f_v"], out["act"] = f_v, act
            out["v_tilde"] = self.vrt(f_v)
        return out

    def fuse(self, enc, keep_maps=False):
        cfg = self.cfg
        C, H, W = cfg.unified
        grid = (H, W)
        k = cfg.pool
        c = self.children
        maps = {}
        if cfg.mode != "fused":
            u = enc["t_tilde"] if cfg.mode == "text-only" else enc["v_tilde"]
            f = softpool(grid_to_sequence(u), grid, k, k)
            f, maps["mhsaf0"] = c["mhsaf0"](f, return_maps=True)
            return f, maps
        v = grid_to_sequence(enc["v_tilde"])
        t = grid_to_sequence(enc["t_tilde"])
        stages = cfg.topology.split("-")
        if stages == ["self", "cross"]:
            v = c["pre_v"](v)
            t = c["pre_t"](t)
            f, maps["cmaf0"] = c["cmaf0"](v, t, return_maps=True)
        elif stages[0] == "self":
            z = softpool(T.concat([v, t], axis=-1), grid, k, k)
            f = c["mix"](z)
            for i in range(len(stages)):
                f, maps[f"mhsaf{i}"] = c[f"mhsaf{i}"](f, return_maps=True)
        else:
            f, maps["cmaf0"] = c["cmaf0"](v, t, return_maps=True)
            if "cmaf1" in c:
                half = C // 2
                f, maps["cmaf1"] = c["cmaf1"](f[:, :, :half], f[:, :, half:], return_maps=True)
            elif "mhsaf0" in c:
                f, maps["mhsaf0"] = c["mhsaf0"](f, return_maps=True)
        return f, maps

    def forward(self, volumes, token_ids, pad_mask, keep_maps=False):
        enc = self.encode(volumes, token_ids, pad_mask)
        f, maps = self.fuse(enc, keep_maps)
        B = f.shape[0]
        enc["f_tbv"] = f
        enc["logits"] = self.head(f.reshape((B, -1)))
        if keep_maps:
            enc["maps"] = maps
        return enc

    __call__ = forward


def probabilities(logits):
    """Softmax probability of the positive (bad prognosis) class."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)
