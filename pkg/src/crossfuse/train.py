"""Cross-validated training and evaluation of :class:`FusionNet`."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import losses as L
from . import tensor as T
from .datagen import MASK, SEQ_LEN, VOCAB_SIZE
from .metrics import MetricsReport, evaluate_scores, write_roc_csv
from .model import FusionNet, ModelConfig, probabilities
from .nn import Adam
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

LOSS_SWITCHES = {
    "none": (False, False, False),
    "imima": (True, False, False),
    "sdm": (False, True, False),
    "mlm": (False, False, True),
    "imima+sdm": (True, True, False),
    "imima+mlm": (True, False, True),
    "vtmf": (True, True, True),
}


# what makes two samples "the same identity" in the pair losses: the same prognosis
# class (any same-label report matches) or the same case (a volume matches only its
# own report)
IDENTITIES = ("class", "case")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 8
    lr: float = 3e-3
    batch_size: int = 16
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    folds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    loss: str = "vtmf"
    mode: str = "fused"
    topology: str = "cross-self"
    alpha: float = 0.84
    beta_w: float = 0.45
    tau: float = 0.02
    eps: float = 1e-8
    mask_rate: float = 0.15
    learn_loss_weights: bool = True
    intra_positive: str = "same_class_next"
    identity: str = "class"
    ce_weight: float = 1.0
    text_dim: int = 16
    unified_channels: int = 8
    unified_extent: int = 16
    heads: int = 4
    head_width: int = 64
    data: str = ""
    out: str = ""

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 for pair losses")
        if self.identity not in IDENTITIES:
            raise ValueError(f"identity must be one of {IDENTITIES}")
        if self.loss not in LOSS_SWITCHES:
            raise ValueError(f"loss must be one of {sorted(LOSS_SWITCHES)}")
        self.seeds = [int(s) for s in self.seeds]
        self.folds = [int(f) for f in self.folds]
        ModelConfig(mode=self.mode, topology=self.topology)  # validates both

    @property
    def weights(self):
        return L.LossWeights(self.alpha, self.beta_w, self.tau, self.eps)

    def model_config(self, extents):
        c, e = self.unified_channels, self.unified_extent
        return ModelConfig(vocab_size=VOCAB_SIZE, seq_len=SEQ_LEN, text_dim=self.text_dim,
                           extents=tuple(extents), unified=(c, e, e), heads=self.heads,
                           head_width=self.head_width, mode=self.mode, topology=self.topology)

    def replace(self, **kw):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(kw)
        return TrainConfig(**d)

    def cell_name(self, seed, fold):
        return f"{self.mode}_{self.topology}_{self.loss.replace('+', 'p')}_s{seed}_f{fold}"


class Arrays:
    """Dataset packed into contiguous arrays."""

    def __init__(self, cases):
        self.volumes = np.stack([c.volume.values for c in cases])
        self.tokens = np.array([c.report.token_ids for c in cases], dtype=np.int64)
        self.pads = np.array([c.report.pad_mask for c in cases], dtype=bool)
        self.labels = np.array([c.label for c in cases], dtype=np.int64)
        self.ids = [c.case_id for c in cases]

    def __len__(self):
        return len(self.labels)


@dataclass
class TrainResult:
    model: FusionNet
    history: list
    train_idx: list
    val_idx: list
    loss_weights: tuple


def _model_seed(seed, fold):
    return int(np.random.SeedSequence([seed, fold, 7]).generate_state(1)[0])


def step_losses(model, cfg: TrainConfig, arr: Arrays, idx, rng, alpha_t=None, beta_t=None):
    """Forward one minibatch; returns (total, components dict of floats)."""
    use_imima, use_sdm, use_mlm = LOSS_SWITCHES[cfg.loss]
    out = model(arr.volumes[idx], arr.tokens[idx], arr.pads[idx])
    y = arr.labels[idx]
    logp = T.log_softmax(out["logits"], axis=-1)
    onehot = np.eye(2)[y]
    ce = -(logp * onehot).sum() * (1.0 / len(idx))
    zero = Tensor(0.0)
    imima = sdm = mlm = zero
    cross = model.uses_text and model.uses_vision
    ids = np.asarray(idx) if cfg.identity == "case" else y
    if cross and use_imima and len(set(ids.tolist())) > 1:
        imima = L.imima_loss(out["f_v"], out["f_t"], ids, cfg.intra_positive, classes=y)
    if cross and use_sdm:
        sdm = L.sdm_loss(out["f_v"], out["f_t"], ids, cfg.weights)
    if model.uses_text and use_mlm:
        mlm = L.mlm_loss(arr.tokens[idx], arr.pads[idx], cfg.mask_rate, model.text.mlm_logits, rng, MASK)
    vtmf = L.vtmf_loss(imima, sdm, mlm, cfg.weights, alpha=alpha_t, beta_w=beta_t)
    total = ce * cfg.ce_weight + vtmf
    comps = {"imima": imima.item(), "sdm": sdm.item(), "mlm": mlm.item(),
             "vtmf": vtmf.item(), "ce": ce.item(), "total": total.item()}
    return total, comps


def train_fold(cfg: TrainConfig, arr: Arrays, train_idx, val_idx, seed, fold, extents=None) -> TrainResult:
    train_idx = [int(i) for i in train_idx]
    val_idx = [int(i) for i in val_idx]
    overlap = set(train_idx) & set(val_idx)
    if overlap:
        raise RuntimeError(f"fold {fold}: validation indices leak into training: {sorted(overlap)[:5]}")
    extents = extents or arr.volumes.shape[1:]
    model = FusionNet(cfg.model_config(extents), seed=_model_seed(seed, fold))
    params = model.parameters()
    alpha_t = beta_t = None
    if cfg.learn_loss_weights:
        alpha_t = Tensor(cfg.alpha, requires_grad=True)
        beta_t = Tensor(cfg.beta_w, requires_grad=True)
        params = params + [alpha_t, beta_t]
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng([seed, fold, 11])
    history = []
    step = 0
    order = np.array(train_idx)
    for epoch in range(cfg.epochs):
        perm = order[rng.permutation(len(order))]
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            opt.zero_grad()
            with Tape() as tape:
                total, comps = step_losses(model, cfg, arr, idx, rng, alpha_t, beta_t)
            if not np.isfinite(comps["total"]):
                raise TrainingDiverged(f"non-finite loss at step {step} (fold {fold}, seed {seed}): {comps}")
            tape.backward(total)
            opt.step()
            if alpha_t is not None:
                # keep learned weights non-negative
                alpha_t.data[...] = max(float(alpha_t.data), 0.0)
                beta_t.data[...] = max(float(beta_t.data), 0.0)
            a = float(alpha_t.data) if alpha_t is not None else cfg.alpha
            b = float(beta_t.data) if beta_t is not None else cfg.beta_w
            history.append({"step": step, **comps, "alpha": a, "beta": b})
            step += 1
    weights = (float(alpha_t.data), float(beta_t.data)) if alpha_t is not None else (cfg.alpha, cfg.beta_w)
    return TrainResult(model, history, train_idx, val_idx, weights)


def predict(model: FusionNet, arr: Arrays, idx, batch=32):
    idx = np.asarray(idx)
    scores = []
    for start in range(0, len(idx), batch):
        b = idx[start:start + batch]
        out = model(arr.volumes[b], arr.tokens[b], arr.pads[b])
        scores.append(probabilities(out["logits"].data))
    return np.concatenate(scores) if scores else np.zeros(0)


def evaluate(model: FusionNet, arr: Arrays, val_idx):
    scores = predict(model, arr, val_idx)
    return evaluate_scores(scores, arr.labels[np.asarray(val_idx)]), scores


def _fmt(x):
    return "nan" if x != x else f"{x:.10g}"


HISTORY_COLUMNS = ["step", "imima", "sdm", "mlm", "vtmf", "alpha", "beta", "ce", "total"]
METRIC_COLUMNS = ["mode", "topology", "loss", "fold", "seed", "acc", "recall", "prec", "f1", "auc"]


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(HISTORY_COLUMNS)
        for row in history:
            wr.writerow([row["step"]] + [_fmt(row[c]) for c in HISTORY_COLUMNS[1:]])


def metric_row(cfg, seed, fold, fm):
    return [cfg.mode, cfg.topology, cfg.loss, fold, seed,
            _fmt(fm.accuracy), _fmt(fm.recall), _fmt(fm.precision), _fmt(fm.f1), _fmt(fm.auc)]


def write_metrics(rows, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRIC_COLUMNS)
        wr.writerows(rows)


def cross_validate(cfg: TrainConfig, arr: Arrays, plan, out_dir=None, save_models=False,
                   keep_going=False, keep_models=False):
    """Train and evaluate every (seed, fold) cell.

    Returns (MetricsReport, metric rows, failures, models). With ``keep_going``
    a failing cell is logged and recorded in ``failures`` instead of raising.
    ``models`` maps (seed, fold) to the trained model when ``keep_models``.
    """
    from .nn import save_checkpoint

    report = MetricsReport()
    rows, failures, models = [], [], {}
    for seed in cfg.seeds:
        for fold in cfg.folds:
            cell = cfg.cell_name(seed, fold)
            try:
                res = train_fold(cfg, arr, plan.training(fold), plan.validation(fold), seed, fold)
                fm, scores = evaluate(res.model, arr, res.val_idx)
            except (TrainingDiverged, FloatingPointError, ValueError) as exc:
                if not keep_going:
                    raise
                log.error("cell %s failed: %s", cell, exc)
                failures.append((seed, fold, str(exc)))
                continue
            report.add(fm, scores, arr.labels[res.val_idx])
            rows.append(metric_row(cfg, seed, fold, fm))
            if keep_models:
                models[(seed, fold)] = res.model
            log.info("%s auc=%.4f acc=%.4f", cell, fm.auc, fm.accuracy)
            if out_dir:
                write_history(res.history, os.path.join(out_dir, f"history_{cell}.csv"))
                if fm.roc is not None:
                    write_roc_csv(fm.roc, os.path.join(out_dir, f"roc_{cell}.csv"))
                if save_models:
                    save_checkpoint(res.model, os.path.join(out_dir, f"model_{cell}"),
                                    {"model_config": res.model.cfg.to_dict(), "seed": seed,
                                     "fold": fold, "train_config": _cfg_dict(cfg)})
    return report, rows, failures, models


def _cfg_dict(cfg):
    return {f.name: getattr(cfg, f.name) for f in fields(cfg)}
