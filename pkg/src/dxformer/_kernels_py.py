"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_kernels.pyx``.
Arrays are C-contiguous float32 or float64; sequence tensors are
channel-first ``[C, T]`` and attention operands are ``[T, d]``.
"""
import math

import numpy as np

BACKEND = "python"


def conv1d_forward(x, w, b, dilation):
    c_out, _, k = w.shape
    t = x.shape[1]
    half = (k - 1) // 2
    pad = dilation * half
    if k == 1:
        return w[:, :, 0] @ x + b[:, None]
    xp = np.zeros((x.shape[0], t + 2 * pad), dtype=x.dtype)
    xp[:, pad:pad + t] = x
    out = np.empty((c_out, t), dtype=x.dtype)
    out[...] = b[:, None]
    for j in range(k):
        start = j * dilation
        out += w[:, :, j] @ xp[:, start:start + t]
    return out


def conv1d_backward(grad, x, w, dilation):
    k = w.shape[2]
    t = x.shape[1]
    pad = dilation * ((k - 1) // 2)
    gb = grad.sum(axis=1)
    if k == 1:
        return w[:, :, 0].T @ grad, (grad @ x.T)[:, :, None], gb
    xp = np.zeros((x.shape[0], t + 2 * pad), dtype=x.dtype)
    xp[:, pad:pad + t] = x
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for j in range(k):
        start = j * dilation
        gw[:, :, j] = grad @ xp[:, start:start + t].T
        gxp[:, start:start + t] += w[:, :, j].T @ grad
    return np.ascontiguousarray(gxp[:, pad:pad + t]), gw, gb


def _chunk(a, nc, w):
    t, d = a.shape
    if nc * w == t:
        return a.reshape(nc, w, d)
    out = np.zeros((nc * w, d), dtype=a.dtype)
    out[:t] = a
    return out.reshape(nc, w, d)


def attention_forward(q, k, v, mask, window):
    """Chunked softmax attention; returns ``(out, probs)`` with probs ``[nc, w, w]``."""
    t, d = q.shape
    window = max(1, min(window, t))
    nc = -(-t // window)
    q3, k3, v3 = _chunk(q, nc, window), _chunk(k, nc, window), _chunk(v, nc, window)
    valid = np.zeros(nc * window, dtype=bool)
    valid[:t] = mask
    valid = valid.reshape(nc, window)
    scores = np.matmul(q3, k3.transpose(0, 2, 1)) / math.sqrt(d)
    scores = np.where(valid[:, None, :], scores, -np.inf)
    top = scores.max(axis=2, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.exp(scores - top)
    s = e.sum(axis=2, keepdims=True)
    probs = e / np.where(s > 0, s, 1.0)
    probs *= valid[:, :, None]
    probs = probs.astype(q.dtype, copy=False)
    out = np.matmul(probs, v3).reshape(nc * window, d)[:t]
    return np.ascontiguousarray(out), probs


def attention_backward(grad, q, k, v, probs, window):
    t, d = q.shape
    window = max(1, min(window, t))
    nc = probs.shape[0]
    q3, k3, v3 = _chunk(q, nc, window), _chunk(k, nc, window), _chunk(v, nc, window)
    g3 = _chunk(grad, nc, window)
    gv = np.matmul(probs.transpose(0, 2, 1), g3)
    gp = np.matmul(g3, v3.transpose(0, 2, 1))
    gs = probs * (gp - (gp * probs).sum(axis=2, keepdims=True))
    gs /= math.sqrt(d)
    gq = np.matmul(gs, k3)
    gk = np.matmul(gs.transpose(0, 2, 1), q3)
    n = nc * window
    return (
        np.ascontiguousarray(gq.reshape(n, d)[:t]),
        np.ascontiguousarray(gk.reshape(n, d)[:t]),
        np.ascontiguousarray(gv.reshape(n, d)[:t]),
    )
