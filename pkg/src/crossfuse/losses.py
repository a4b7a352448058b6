"""Joint vision-text training objective and its three components.

* IMIMA: exponential-similarity contrastive alignment in four directions
  (t2t, v2v, t2v, v2t) against negatives of a different identity.
* SDM: KL divergence between the cosine-similarity softmax ``p`` and the
  true matching distribution ``q``, summed over both directions.
* MLM: cross-entropy on randomly masked text tokens.
* VTMF: ``imima + alpha * sdm + beta_w * mlm``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha: float = 0.84
    beta_w: float = 0.45
    tau: float = 0.02
    eps: float = 1e-8

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.alpha < 0 or self.beta_w < 0:
            raise ValueError("loss weights must be non-negative")


def matching_matrix(ids):
    ids = np.asarray(ids)
    return (ids[:, None] == ids[None, :]).astype(np.float64)


def l2_normalize(f, axis=-1):
    norm = T.sqrt((f * f).sum(axis=axis, keepdims=True))
    if (norm.data == 0).any():
        raise LossError("zero-norm representation")
    return f / norm


def _intra_positive(ids, strategy):
    """Index of the intra-modal positive for each anchor, or -1 if none."""
    ids = np.asarray(ids)
    n = len(ids)
    if strategy == "self":
        return np.arange(n)
    if strategy != "same_class_next":
        raise ValueError(f"unknown intra-positive strategy {strategy!r}")
    pos = np.full(n, -1)
    for i in range(n):
        for step in range(1, n):
            j = (i + step) % n
            if ids[j] == ids[i]:
                pos[i] = j
                break
    return pos


def directional_term(fa, fb, ids, positives):
    """Mean over anchors of ``-log(d+ / (d+ + sum_{k in N} d_k))`` with ``d = exp(a.b)``.

    ``fa``/``fb`` are ``[n, D]`` (already normalized); ``positives[i]`` indexes
    the positive in ``fb`` (-1 skips the anchor). The negative set ``N`` is the
    rows of ``fb`` whose identity differs from the anchor's; a positive with a
    different identity is therefore also counted among the negatives.
    """
    ids = np.asarray(ids)
    neg = (ids[:, None] != ids[None, :])
    valid = (positives >= 0) & neg.any(axis=1)
    if not valid.any():
        raise LossError("no anchor has both a positive and a negative")
    rows = np.nonzero(valid)[0]
    sims = fa[rows] @ fb.T  # [r, n]
    sel = np.zeros(sims.shape)
    sel[np.arange(len(rows)), positives[rows]] = 1.0
    pos_logit = (sims * sel).sum(axis=1)
    masked = sims + np.where(neg[rows], 0.0, -np.inf)
    logits = T.concat([pos_logit.reshape((len(rows), 1)), masked], axis=1)
    return (_logsumexp_rows(logits) - pos_logit).mean()


def _logsumexp_rows(x):
    m = np.where(np.isfinite(x.data), x.data, -np.inf).max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = T.exp(x - m)
    return T.log(e.sum(axis=1)) + m[:, 0]


def imima_terms(f_v, f_t, ids, strategy="same_class_next", normalize=True, classes=None):
    """The four directional terms as a dict keyed t2t, v2v, t2v, v2t.

    ``ids`` are identities: the cross-modal positive shares the anchor's
    index and negatives are samples of another identity. ``classes`` choose
    the intra-modal positive (defaults to ``ids``).
    """
    ids = np.asarray(ids)
    if len(set(ids.tolist())) < 2:
        raise LossError("all samples share one identity: negative sets are empty")
    if normalize:
        f_v, f_t = l2_normalize(f_v), l2_normalize(f_t)
    intra = _intra_positive(ids if classes is None else classes, strategy)
    inter = np.arange(len(ids))
    terms = {}
    for name, fa, fb, pos in (("t2t", f_t, f_t, intra), ("v2v", f_v, f_v, intra),
                              ("t2v", f_t, f_v, inter), ("v2t", f_v, f_t, inter)):
        try:
            terms[name] = directional_term(fa, fb, ids, pos)
        except LossError:
            terms[name] = Tensor(0.0)
    return terms


def imima_loss(f_v, f_t, ids, strategy="same_class_next", normalize=True, classes=None):
    terms = imima_terms(f_v, f_t, ids, strategy, normalize, classes)
    return terms["t2t"] + terms["v2v"] + terms["t2v"] + terms["v2t"]


def cosine_matrix(a, b):
    return l2_normalize(a) @ l2_normalize(b).T


def matching_probabilities(f_a, f_b, tau):
    """``p[i, j]`` = softmax over j of ``cos(f_a_i, f_b_j) / tau``."""
    return T.softmax(cosine_matrix(f_a, f_b) * (1.0 / tau), axis=-1)


def sdm_direction(f_a, f_b, ids, tau, eps):
    n = f_a.shape[0]
    l = matching_matrix(ids)
    q = l / l.sum(axis=1, keepdims=True)
    logits = cosine_matrix(f_a, f_b) * (1.0 / tau)
    logp = T.log_softmax(logits, axis=-1)
    p = T.exp(logp)
    kl = p * (logp - np.log(q + eps))
    return kl.sum() * (1.0 / n)


def sdm_loss(f_v, f_t, ids, weights: LossWeights | None = None):
    weights = weights or LossWeights()
    if f_v.shape[0] < 2:
        raise LossError("SDM needs at least two pairs")
    return (sdm_direction(f_v, f_t, ids, weights.tau, weights.eps)
            + sdm_direction(f_t, f_v, ids, weights.tau, weights.eps))


def mask_tokens(token_ids, pad_mask, mask_rate, rng, mask_id):
    """Pick ``ceil(rate * maskable)`` non-pad positions per row and replace them.

    Returns (masked ids, boolean selection).
    """
    if not 0 < mask_rate <= 1:
        raise ValueError("mask_rate must be in (0, 1]")
    ids = np.array(token_ids, dtype=np.int64, copy=True)
    pad = np.asarray(pad_mask, dtype=bool)
    if ids.ndim == 1:
        ids, pad = ids[None], pad[None]
    chosen = np.zeros(ids.shape, dtype=bool)
    for r in range(ids.shape[0]):
        cand = np.nonzero(~pad[r])[0]
        if cand.size == 0:
            raise LossError("sequence has no maskable tokens")
        m = math.ceil(mask_rate * cand.size)
        pick = rng.choice(cand, size=m, replace=False)
        chosen[r, pick] = True
    ids[chosen] = mask_id
    return ids, chosen


def masked_cross_entropy(logits, targets, chosen):
    """Mean cross-entropy over the selected positions of ``[B, S, V]`` logits."""
    targets = np.asarray(targets, dtype=np.int64).reshape(chosen.shape)
    logp = T.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    b, s = np.nonzero(chosen)
    onehot[b, s, targets[b, s]] = 1.0
    return -(logp * onehot).sum() * (1.0 / len(b))


def mlm_loss(token_ids, pad_mask, mask_rate, model, rng, mask_id):
    """Mask tokens, run ``model(masked_ids, pad_mask) -> [B, S, V]``, score originals."""
    masked, chosen = mask_tokens(token_ids, pad_mask, mask_rate, rng, mask_id)
    pad = np.asarray(pad_mask, dtype=bool).reshape(masked.shape)
    logits = model(masked, pad)
    if logits.ndim == 2:
        logits = logits.reshape((1,) + logits.shape)
    return masked_cross_entropy(logits, np.asarray(token_ids).reshape(masked.shape), chosen)


def vtmf_loss(l_imima, l_sdm, l_mlm, weights: LossWeights | None = None, alpha=None, beta_w=None):
    """``l_imima + alpha * l_sdm + beta_w * l_mlm``.

    ``alpha``/``beta_w`` may be tensors (learned weights); otherwise taken from
    ``weights``.
    """
    weights = weights or LossWeights()
    alpha = weights.alpha if alpha is None else alpha
    beta_w = weights.beta_w if beta_w is None else beta_w
    for name, v in (("imima", l_imima), ("sdm", l_sdm), ("mlm", l_mlm)):
        val = v.data if isinstance(v, Tensor) else np.asarray(v)
        if not np.isfinite(val).all():
            raise LossError(f"non-finite {name} component")
    return T.as_tensor(l_imima) + T.as_tensor(l_sdm) * alpha + T.as_tensor(l_mlm) * beta_w
