"""Parameter containers, dense layers, Adam, and checkpoint I/O."""
from __future__ import annotations

import json
import os

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds named parameter tensors and child modules."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.children: dict[str, Module] = {}

    def param(self, name, value):
        t = Tensor(value, requires_grad=True)
        self.params[name] = t
        return t

    def child(self, name, module):
        self.children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, mod in self.children.items():
            yield from mod.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """``y = x @ W + b`` applied over the last axis."""

    def __init__(self, n_in, n_out, rng, bias=True, scale=None):
        super().__init__()
        scale = 1.0 / np.sqrt(n_in) if scale is None else scale
        self.W = self.param("W", rng.normal(0.0, scale, size=(n_in, n_out)))
        self.b = self.param("b", np.zeros(n_out)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            tmp = np.multiply(g, g, out=np.empty_like(v))
            tmp *= 1.0 - self.b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp *= 1.0 / np.sqrt(c2)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / c1
            # in place so the tensors held by modules see the update
            p.data -= tmp

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def save_checkpoint(module: Module, directory, extra: dict | None = None):
    """One tensor file per parameter block plus ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    blocks = []
    for name, p in module.named_parameters():
        fname = name + ".bin"
        T.save(p, os.path.join(directory, fname))
        blocks.append({"name": name, "file": fname, "shape": list(p.shape)})
    manifest = {"blocks": blocks}
    if extra:
        manifest.update(extra)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_checkpoint(module: Module, directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    params = dict(module.named_parameters())
    for block in manifest["blocks"]:
        if block["name"] not in params:
            raise KeyError(f"checkpoint block {block['name']!r} not in model")
        t = T.load(os.path.join(directory, block["file"]))
        target = params[block["name"]]
        if t.shape != target.shape:
            raise ValueError(f"shape mismatch for {block['name']}: {t.shape} vs {target.shape}")
        target.data[...] = t.data
    return manifest
