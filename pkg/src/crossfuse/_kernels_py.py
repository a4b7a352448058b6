"""Pure numpy kernels: valid 3D cross-correlation and fused softmax attention.

Used when the compiled ``_kernels`` extension is unavailable or disabled
with ``CROSSFUSE_PURE_PYTHON=1``. Both backends share this signature.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_extent(n, k, stride):
    return (n - k) // stride + 1


def _columns(x, k, stride):
    # x: [B, C, D, H, W] -> [B*D'*H'*W', C*k^3]
    win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    B, C, Do, Ho, Wo = win.shape[:5]
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(B * Do * Ho * Wo, C * k ** 3)
    return cols, (Do, Ho, Wo)


def conv3d_forward(x, w, stride):
    B = x.shape[0]
    O, _, k = w.shape[0], w.shape[1], w.shape[2]
    cols, (Do, Ho, Wo) = _columns(x, k, stride)
    out = cols @ w.reshape(O, -1).T
    return np.ascontiguousarray(out.reshape(B, Do, Ho, Wo, O).transpose(0, 4, 1, 2, 3))


def conv3d_backward(x, w, gout, stride, need_input_grad=True):
    B, C = x.shape[:2]
    O, k = w.shape[0], w.shape[2]
    cols, (Do, Ho, Wo) = _columns(x, k, stride)
    g = gout.transpose(0, 2, 3, 4, 1).reshape(-1, O)
    gw = (g.T @ cols).reshape(w.shape)
    if not need_input_grad:
        return None, gw
    gcols = (g @ w.reshape(O, -1)).reshape(B, Do, Ho, Wo, C, k, k, k)
    gx = np.zeros_like(x)
    s = stride
    for i in range(k):
        for j in range(k):
            for l in range(k):
                gx[:, :, i:i + s * Do:s, j:j + s * Ho:s, l:l + s * Wo:s] += (
                    gcols[..., i, j, l].transpose(0, 4, 1, 2, 3))
    return gx, gw


def attend_forward(a, b, v, scale):
    logits = (a @ np.swapaxes(b, -1, -2)) * scale
    p = logits - logits.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    return p @ v, p


def attend_backward(a, b, v, p, go, scale):
    gp = go @ np.swapaxes(v, -1, -2)
    gl = gp - (gp * p).sum(axis=-1, keepdims=True)
    gl *= p
    gl *= scale
    ga = gl @ b
    gb = np.swapaxes(gl, -1, -2) @ a
    gv = np.swapaxes(p, -1, -2) @ go
    return ga, gb, gv
