"""Score-CAM heatmaps on one axial slice of the input volume.

Channel maps of the last vision convolution are resampled to the slice,
used as multiplicative masks on that slice only, and weighted by the
softmax of the target-class logits they produce.
"""
from __future__ import annotations

import csv
import logging

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)


def default_slice(depth):
    """Slice 25 of 64, scaled to other depths."""
    return (depth * 25) // 64


def receptive_centers(n_layers, kernel=3, stride=2):
    """Return (offset, step): output index ``m`` is centred on input ``offset + step * m``."""
    offset, step = 0.0, 1.0
    for _ in range(n_layers):
        offset += step * (kernel - 1) / 2.0
        step *= stride
    return offset, step


def upsample_to_slice(act, slice_index, out_hw, offset, step):
    """Linearly interpolate ``act[c, d, h, w]`` at input slice ``slice_index``.

    Activation voxels sit at their receptive-field centres; positions outside
    the outermost centres take the nearest value.
    """
    C = act.shape[0]
    H, W = out_hw
    zz = np.full((H, W), (slice_index - offset) / step)
    yy, xx = np.meshgrid((np.arange(H) - offset) / step, (np.arange(W) - offset) / step, indexing="ij")
    coords = np.stack([zz, yy, xx])
    return np.stack([ndimage.map_coordinates(act[c], coords, order=1, mode="nearest") for c in range(C)])


def _minmax(m):
    lo, hi = m.min(), m.max()
    if hi - lo <= 0:
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def score_cam(model, volume, token_ids, pad_mask, slice_index, target=None):
    """Return (heatmap ``[H, W]`` in [0, 1], info dict).

    ``target`` defaults to the model's predicted class for the unmasked input.
    """
    vol = np.asarray(volume, dtype=np.float64)
    D, H, W = vol.shape
    if not 0 <= slice_index < D:
        raise ValueError(f"slice {slice_index} outside depth {D}")
    if not model.uses_vision:
        raise ValueError("Score-CAM needs a model with a vision branch")
    tok = np.asarray(token_ids)[None]
    pad = np.asarray(pad_mask, dtype=bool)[None]
    base = model(vol[None], tok, pad)
    logits = base["logits"].data[0]
    if target is None:
        target = int(np.argmax(logits))
    act = base["act"].data[0]  # [C, d, h, w]
    enc = model.children["vision"]
    offset, step = receptive_centers(len(enc.channels), enc.kernel, enc.stride)
    maps = upsample_to_slice(act, slice_index, (H, W), offset, step)
    info = {"target": target, "logits": logits.tolist(), "channels": maps.shape[0]}
    if not np.any(maps):
        log.warning("all-zero activations at slice %d; returning a uniform heatmap", slice_index)
        info["uniform"] = True
        return np.ones((H, W)), info
    masks = np.stack([_minmax(m) for m in maps])
    batch = np.repeat(vol[None], len(masks), axis=0)
    batch[:, slice_index] *= masks
    out = model(batch, np.repeat(tok, len(masks), axis=0), np.repeat(pad, len(masks), axis=0))
    scores = out["logits"].data[:, target]
    z = np.exp(scores - scores.max())
    weights = z / z.sum()
    cam = np.maximum(np.tensordot(weights, maps, axes=1), 0.0)
    info["weights"] = weights.tolist()
    info["uniform"] = False
    if cam.max() - cam.min() <= 0:
        log.warning("flat class activation map; returning a uniform heatmap")
        info["uniform"] = True
        return np.ones((H, W)), info
    return _minmax(cam), info


def center_of_mass(heatmap):
    """(row, col) weighted centre of a non-negative map."""
    h = np.asarray(heatmap, dtype=np.float64)
    total = h.sum()
    if total <= 0:
        return ((h.shape[0] - 1) / 2.0, (h.shape[1] - 1) / 2.0)
    rows, cols = np.indices(h.shape)
    return (float((rows * h).sum() / total), float((cols * h).sum() / total))


def inside_box(point, box):
    """``box`` is ``[[r_lo, r_hi], [c_lo, c_hi]]``, inclusive."""
    return all(lo <= p <= hi for p, (lo, hi) in zip(point, box))


def write_pgm(heatmap, path, maxval=255):
    """Plain (ASCII, P2) greyscale image of a [0, 1] map."""
    h = np.clip(np.asarray(heatmap, dtype=np.float64), 0.0, 1.0)
    px = np.rint(h * maxval).astype(int)
    with open(path, "w") as fh:
        fh.write(f"P2\n{px.shape[1]} {px.shape[0]}\n{maxval}\n")
        for row in px:
            fh.write(" ".join(str(v) for v in row) + "\n")


def read_pgm(path):
    with open(path) as fh:
        tokens = [t for line in fh for t in line.split("#", 1)[0].split()]
    if tokens[0] != "P2":
        raise ValueError("not an ASCII PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.array(tokens[4:4 + w * h], dtype=np.int64).reshape(h, w), maxval


def write_heatmap_csv(heatmap, path):
    """``row,col,value`` per pixel."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["row", "col", "value"])
        for (r, c), v in np.ndenumerate(np.asarray(heatmap)):
            wr.writerow([r, c, repr(float(v))])
