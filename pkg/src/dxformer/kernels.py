"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it imports; otherwise the
numpy implementations in ``_kernels_py`` are used. Both expose the same four
functions. Some cases always go to numpy because BLAS wins there: 1x1
convolutions (a single GEMM), attention whose window covers the whole
unpadded sequence (one dense score matrix) and attention whose per-frame
work ``window * d`` is large enough for batched matmuls to beat the loops.
"""
import math

import numpy as np

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_active = _compiled if _compiled is not None else _kernels_py

# measured crossovers (see benchmarks/bench_kernels.py)
LOOP_ATTENTION_FORWARD_MAX = 128
LOOP_ATTENTION_BACKWARD_MAX = 64


def available_backends():
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "cython")
    return names


def get_backend():
    return _active.BACKEND


def set_backend(name):
    """Switch the active backend (``"cython"`` or ``"python"``); returns the previous name."""
    global _active
    previous = _active.BACKEND
    if name == "python":
        _active = _kernels_py
    elif name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        _active = _compiled
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous


class use_backend:
    """Context manager that temporarily selects a backend."""

    def __init__(self, name):
        self.name = name
        self._previous = None

    def __enter__(self):
        self._previous = set_backend(self.name)
        return self

    def __exit__(self, *exc):
        set_backend(self._previous)
        return False


def conv1d_forward(x, w, b, dilation):
    if w.shape[2] == 1:
        return _kernels_py.conv1d_forward(x, w, b, dilation)
    return _active.conv1d_forward(x, w, b, dilation)


def conv1d_backward(grad, x, w, dilation):
    if w.shape[2] == 1:
        return _kernels_py.conv1d_backward(grad, x, w, dilation)
    return _active.conv1d_backward(grad, x, w, dilation)


def _is_dense(mask, window):
    return window >= mask.shape[0] and bool(mask.all())


def dense_attention_forward(q, k, v):
    scores = q @ k.T / math.sqrt(q.shape[1])
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=1, keepdims=True)
    return probs @ v, probs[None]


def attention_forward(q, k, v, mask, window):
    """Returns ``(out, probs)``; ``probs`` is opaque state for :func:`attention_backward`."""
    if _is_dense(mask, window):
        return dense_attention_forward(q, k, v)
    impl = _active if min(window, q.shape[0]) * q.shape[1] <= LOOP_ATTENTION_FORWARD_MAX else _kernels_py
    return impl.attention_forward(q, k, v, np.ascontiguousarray(mask, dtype=np.uint8), window)


def attention_backward(grad, q, k, v, probs, window):
    single_chunk = probs.shape[0] == 1 and probs.shape[1] == q.shape[0]
    if single_chunk or probs.shape[1] * q.shape[1] > LOOP_ATTENTION_BACKWARD_MAX:
        return _kernels_py.attention_backward(grad, q, k, v, probs, window)
    return _active.attention_backward(grad, q, k, v, probs, window)
