"""Synthetic bimodal prognosis cohort, volume preprocessing, and fold planning.

Each case is a CT-like volume (one ellipsoidal lesion on a smooth background,
in Hounsfield-like units) plus a templated clinical report. Label 1 means bad
prognosis.

Two kinds of case are generated:

* vision-signal cases: lesion size and density depend on the label; the
  report's GCS band is only weakly informative and stays in the middle bands.
* text-signal cases (the complementarity fraction): the lesion looks like a
  random case of either class, and the GCS band sits in an extreme band that
  encodes the label. Only the report tells these apart.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T
from .encoders import TextSequence, Volume

PAD, MASK = 0, 1
# largest axis / radius after the volume-preserving axis rescale
ELONGATION = 1.15 / np.cbrt(0.85 * 0.85 * 1.15)

# field name -> number of value bins, in template order
FIELDS = (
    ("gender", 2),
    ("age", 5),
    ("onset", 4),
    ("stay", 4),
    ("gcs", 4),
    ("volume", 4),
)
OPTIONAL_FIELDS = ("onset", "stay")


def vocab_layout():
    """Token ids: 0 pad, 1 mask, then per field a name token followed by its bins."""
    layout, nxt = {}, 2
    for name, bins in FIELDS:
        layout[name] = {"name": nxt, "values": list(range(nxt + 1, nxt + 1 + bins))}
        nxt += 1 + bins
    return layout, nxt


VOCAB, VOCAB_SIZE = vocab_layout()
SEQ_LEN = 2 * len(FIELDS)


class GenerationError(ValueError):
    pass


@dataclass
class GenConfig:
    n: int = 300
    balance: float = 0.5
    extent: int = 32
    vision_strength: float = 1.0
    text_strength: float = 1.0
    complementarity: float = 0.3
    radius_mid: float = 5.5
    radius_shift: float = 1.5
    radius_jitter: float = 0.6
    hu_mid: float = 62.0
    hu_shift: float = 8.0
    hu_jitter: float = 3.0
    background_hu: float = 30.0
    noise_hu: float = 6.0
    depth_range: tuple = (9.0, 15.0)
    cue_strength: float = 0.15
    missing_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("vision_strength", "text_strength", "cue_strength"):
            if getattr(self, name) < 0:
                raise GenerationError(f"{name} must be non-negative")
        if not 0.0 <= self.complementarity <= 1.0:
            raise GenerationError("complementarity must be in [0, 1]")
        if not 0.0 < self.balance < 1.0:
            raise GenerationError("balance must be in (0, 1)")
        self.depth_range = tuple(self.depth_range)
        r_max = self.radius_mid + self.radius_shift * max(self.vision_strength, 1.0) + 2 * self.radius_jitter
        if 2 * ELONGATION * r_max + 2 > self.extent:
            raise GenerationError(f"lesion radius up to {r_max:.1f} does not fit extent {self.extent}")
        lo, hi = self.depth_range
        if lo - r_max < 0 or hi + r_max > self.extent - 1:
            raise GenerationError("depth_range lets lesions leave the volume")

    def to_dict(self):
        d = asdict(self)
        d["depth_range"] = list(self.depth_range)
        return d


@dataclass
class SyntheticCase:
    case_id: int
    volume: Volume
    report: TextSequence
    label: int
    meta: dict = field(default_factory=dict)


def render_report(meta: dict) -> TextSequence:
    """Fixed-order ``[field, value]`` token pairs; missing optional fields are skipped
    and the sequence is right-padded to a fixed length."""
    ids = []
    for name, bins in FIELDS:
        v = meta.get(name)
        if v is None:
            if name in OPTIONAL_FIELDS:
                continue
            raise GenerationError(f"required field {name!r} missing")
        if not 0 <= int(v) < bins:
            raise GenerationError(f"field {name!r} bin {v} outside [0, {bins})")
        ids += [VOCAB[name]["name"], VOCAB[name]["values"][int(v)]]
    pad = [False] * len(ids) + [True] * (SEQ_LEN - len(ids))
    ids += [PAD] * (SEQ_LEN - len(ids))
    return TextSequence(ids, VOCAB_SIZE, pad)


def preprocess_volume(vol, window=(0.0, 80.0)):
    """Clamp to the HU window, then z-score over the whole volume."""
    lo, hi = window
    if hi <= lo:
        raise GenerationError("window upper bound must exceed lower bound")
    v = np.clip(vol.values if isinstance(vol, Volume) else np.asarray(vol, dtype=np.float64), lo, hi)
    sd = v.std()
    if sd == 0:
        raise GenerationError("volume is constant after clamping")
    out = (v - v.mean()) / sd
    spacing = vol.spacing if isinstance(vol, Volume) else (1.0, 1.0, 1.0)
    return Volume(out, spacing)


def _background(rng, cfg):
    n = cfg.extent
    noise = ndimage.gaussian_filter(rng.normal(size=(n, n, n)), sigma=2.0, mode="wrap")
    noise /= noise.std()
    return cfg.background_hu + cfg.noise_hu * noise


def _case(cfg: GenConfig, idx: int, label: int, text_case: bool):
    rng = np.random.default_rng([cfg.seed, idx])
    sign = 1.0 if label == 1 else -1.0
    # text-signal cases draw their lesion as if from a random class
    look = sign if not text_case else (1.0 if rng.random() < 0.5 else -1.0)
    vs = cfg.vision_strength
    radius = cfg.radius_mid + vs * look * cfg.radius_shift + rng.uniform(-1, 1) * cfg.radius_jitter
    hu = cfg.hu_mid + vs * look * cfg.hu_shift + rng.uniform(-1, 1) * cfg.hu_jitter
    n = cfg.extent
    lo_c = radius + 1.0
    center = (rng.uniform(*cfg.depth_range), rng.uniform(lo_c, n - 1 - lo_c), rng.uniform(lo_c, n - 1 - lo_c))
    axes = radius * rng.uniform(0.85, 1.15, size=3)
    axes *= radius / np.cbrt(axes.prod())
    # elongation can stretch one axis past the margin used for the center draw
    center = tuple(float(np.clip(c, a, n - 1 - a)) for c, a in zip(center, axes))
    if any(c - a < 0 or c + a > n - 1 for c, a in zip(center, axes)):
        raise GenerationError(f"case {idx}: lesion leaves the volume")
    vol = _background(rng, cfg)
    zz, yy, xx = np.meshgrid(*(np.arange(n),) * 3, indexing="ij")
    inside = (((zz - center[0]) / axes[0]) ** 2 + ((yy - center[1]) / axes[1]) ** 2
              + ((xx - center[2]) / axes[2]) ** 2) <= 1.0
    vol[inside] = hu + 2.0 * rng.normal(size=inside.sum())
    lesion_ml = float(inside.sum())

    # report fields
    ts = cfg.text_strength
    if text_case:
        agree = rng.random() < min(1.0, 0.5 + 0.5 * ts)
        gcs = (0 if label == 1 else 3) if agree else (3 if label == 1 else 0)
    else:
        # vision-signal cases only get faint clinical cues
        gcs = 1 if rng.random() < 0.5 + 0.5 * min(cfg.cue_strength, 1.0) * sign else 2
    cue = min(cfg.cue_strength * ts, 1.0) * sign
    age = int(np.clip(rng.normal(2.0 + cue, 1.2), 0, 4))
    size = (radius - cfg.radius_mid) / cfg.radius_shift  # about +-1 when the lesion is informative
    vol_band = int(np.clip(np.round(1.5 + cfg.cue_strength * size + rng.normal(0, 1.0)), 0, 3))
    meta = {
        "gender": int(rng.integers(2)),
        "age": age,
        "onset": None if rng.random() < cfg.missing_rate else int(rng.integers(4)),
        "stay": None if rng.random() < cfg.missing_rate else int(rng.integers(4)),
        "gcs": gcs,
        "volume": vol_band,
    }
    planted = {
        "center": [float(c) for c in center],
        "axes": [float(a) for a in axes],
        "radius": float(radius),
        "intensity": float(hu),
        "lesion_voxels": lesion_ml,
        "text_case": bool(text_case),
        "bbox": [[float(max(0.0, c - a)), float(min(n - 1.0, c + a))] for c, a in zip(center, axes)],
    }
    return vol, meta, planted


def generate_dataset(cfg: GenConfig, preprocess=True, window=(0.0, 80.0)):
    """Deterministic list of :class:`SyntheticCase` for ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    n_bad = int(round(cfg.n * cfg.balance))
    labels = np.array([1] * n_bad + [0] * (cfg.n - n_bad))
    rng.shuffle(labels)
    # exact complementarity count per class keeps the kinds balanced
    text_case = np.zeros(cfg.n, dtype=bool)
    for c in (0, 1):
        idx = np.nonzero(labels == c)[0]
        k = int(round(cfg.complementarity * len(idx)))
        text_case[rng.choice(idx, size=k, replace=False)] = True
    cases = []
    for i in range(cfg.n):
        raw, meta, planted = _case(cfg, i, int(labels[i]), bool(text_case[i]))
        vol = Volume(raw)
        if preprocess:
            vol = preprocess_volume(vol, window)
        report = render_report(meta)
        cases.append(SyntheticCase(i, vol, report, int(labels[i]), {**planted, "fields": meta}))
    return cases


@dataclass
class FoldPlan:
    folds: list  # fold index per sample
    k: int = 5

    def validation(self, fold):
        return [i for i, f in enumerate(self.folds) if f == fold]

    def training(self, fold):
        return [i for i, f in enumerate(self.folds) if f != fold]


def make_folds(labels, k=5, seed=0) -> FoldPlan:
    """Stratified shuffled assignment: each class is dealt round-robin over folds."""
    labels = np.asarray(labels)
    if len(labels) < k:
        raise GenerationError(f"need at least {k} samples for {k} folds")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise GenerationError("both classes must be present")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(labels), dtype=int)
    offset = 0
    for c in classes:
        idx = np.nonzero(labels == c)[0]
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = (np.arange(len(idx)) + offset) % k
        offset += len(idx)
    return FoldPlan([int(f) for f in folds], k)


# on-disk layout ------------------------------------------------------------

def save_dataset(cases, cfg: GenConfig, out_dir, folds: FoldPlan | None = None):
    os.makedirs(out_dir, exist_ok=True)
    for case in cases:
        d = os.path.join(out_dir, f"case_{case.case_id:04d}")
        os.makedirs(d, exist_ok=True)
        T.save(case.volume.values, os.path.join(d, "volume.bin"))
        report = {
            "case_id": case.case_id,
            "token_ids": [int(t) for t in case.report.token_ids],
            "pad_mask": [bool(p) for p in case.report.pad_mask],
            "vocab_size": case.report.vocab_size,
            "label": case.label,
            "meta": case.meta,
        }
        with open(os.path.join(d, "report.json"), "w") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
    folds = folds or make_folds([c.label for c in cases], 5, cfg.seed)
    with open(os.path.join(out_dir, "folds.json"), "w") as fh:
        json.dump({"k": folds.k, "seed": cfg.seed, "folds": folds.folds}, fh)
    with open(os.path.join(out_dir, "genconfig.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)


def load_dataset(data_dir):
    with open(os.path.join(data_dir, "genconfig.json")) as fh:
        gd = json.load(fh)
    cfg = GenConfig(**gd)
    with open(os.path.join(data_dir, "folds.json")) as fh:
        fd = json.load(fh)
    cases = []
    for name in sorted(os.listdir(data_dir)):
        d = os.path.join(data_dir, name)
        if not (name.startswith("case_") and os.path.isdir(d)):
            continue
        with open(os.path.join(d, "report.json")) as fh:
            rep = json.load(fh)
        vol = Volume(T.load(os.path.join(d, "volume.bin")).data)
        seq = TextSequence(rep["token_ids"], rep["vocab_size"], rep["pad_mask"])
        cases.append(SyntheticCase(rep["case_id"], vol, seq, rep["label"], rep["meta"]))
    return cases, cfg, FoldPlan(fd["folds"], fd["k"])
