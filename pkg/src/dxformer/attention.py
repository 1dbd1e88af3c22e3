"""Windowed attention and the dual dilated attention (DA) block.

A DA block runs two branches over the same input. Each branch is a dilated
convolution, a ReLU, instance normalization over time and single-head
attention restricted to non-overlapping chunks; the convolution dilation
equals the chunk length. The attention output is added back onto the
(unnormalized) convolution features.

Branch one grows its window with depth (``2**i``) and branch two shrinks it
(``2**(N - i)``). The branch outputs are concatenated, fused by a 1x1
convolution and added back onto the block input.

Encoder blocks use self-attention. Decoder blocks build their queries and
keys from the branch features concatenated with the matching encoder block
output; values come from the branch features alone (``cross_qv_mode="qk"``).
``cross_qv_mode="qv"`` swaps the roles of keys and values.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as tn
from .errors import ConfigError, DimensionError, WiringError
from .tensor import Tensor

ROLES = ("encoder", "decoder")
CROSS_QV_MODES = ("qk", "qv")


def window_size(branch, i, n):
    """Window (and dilation) of a branch at block ``i`` of ``n``."""
    if not 1 <= i <= n:
        raise ConfigError(f"block index {i} outside [1, {n}]")
    if branch in ("increasing", "inc"):
        return 2 ** i
    if branch in ("decreasing", "dec"):
        return 2 ** (n - i)
    raise ConfigError(f"unknown branch {branch!r}")


@dataclass(frozen=True)
class BlockSpec:
    block_index: int
    n_blocks: int
    role: str = "encoder"
    dual: bool = True
    cross_qv_mode: str = "qk"

    def __post_init__(self):
        if not 1 <= self.block_index <= self.n_blocks:
            raise ConfigError(f"block index {self.block_index} outside [1, {self.n_blocks}]")
        if self.role not in ROLES:
            raise ConfigError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.cross_qv_mode not in CROSS_QV_MODES:
            raise ConfigError(f"cross_qv_mode must be one of {CROSS_QV_MODES}, got {self.cross_qv_mode!r}")

    @property
    def w_inc(self):
        return window_size("increasing", self.block_index, self.n_blocks)

    @property
    def w_dec(self):
        return window_size("decreasing", self.block_index, self.n_blocks)

    def branches(self):
        """``(name, window)`` pairs of the active branches; dilation equals window."""
        if self.dual:
            return [("inc", self.w_inc), ("dec", self.w_dec)]
        return [("inc", self.w_inc)]


@dataclass
class AttentionInput:
    q: Tensor
    k: Tensor
    v: Tensor
    pad_mask: np.ndarray = None

    def __post_init__(self):
        if self.q.ndim != 2 or self.q.shape != self.k.shape or self.q.shape != self.v.shape:
            raise DimensionError(f"Q, K, V must share [T, d]; got {self.q.shape}, {self.k.shape}, {self.v.shape}")
        t = self.q.shape[0]
        if self.pad_mask is None:
            self.pad_mask = np.ones(t, dtype=bool)
        else:
            self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
            if self.pad_mask.shape != (t,):
                raise DimensionError(f"pad_mask shape {self.pad_mask.shape} does not match T={t}")


def windowed_attention(inp, w, return_weights=False):
    """Softmax attention within consecutive chunks of ``w`` frames.

    Padded frames get zero weight as keys and produce zero rows as queries.
    With ``return_weights`` the per-chunk weights are returned as well
    (shape ``[n_chunks, w', w']`` where ``w' = min(w, T)``).
    """
    if w < 1:
        raise ConfigError(f"window must be >= 1, got {w}")
    q, k, v = inp.q, inp.k, inp.v
    tn._same_dtype("windowed_attention", q, k, v)
    qd, kd, vd = q.data, k.data, v.data
    out, probs = kernels.attention_forward(qd, kd, vd, inp.pad_mask, int(w))

    def back(g):
        return kernels.attention_backward(np.ascontiguousarray(g), qd, kd, vd, probs, int(w))

    result = tn._record(out, "windowed_attention", (q, k, v), back)
    if return_weights:
        return result, probs
    return result


def chunk_weights_to_dense(probs, t):
    """Scatter per-chunk attention weights into a dense ``[T, T]`` matrix."""
    nc, w, _ = probs.shape
    dense = np.zeros((t, t), dtype=probs.dtype)
    for c in range(nc):
        lo = c * w
        hi = min(lo + w, t)
        dense[lo:hi, lo:hi] = probs[c, : hi - lo, : hi - lo]
    return dense


def attention_dim(model_dim):
    return max(4, model_dim // 4)


def block_param_shapes(model_dim, spec, attn_dim=None, kernel_size=3):
    """Name -> shape for one DA block, names relative to the block prefix."""
    f = model_dim
    d = attention_dim(f) if attn_dim is None else attn_dim
    shapes = {}
    decoder = spec.role == "decoder"
    q_in = 2 * f if decoder else f
    k_in = 2 * f if decoder and spec.cross_qv_mode == "qk" else f
    v_in = 2 * f if decoder and spec.cross_qv_mode == "qv" else f
    for name, _ in spec.branches():
        shapes[f"{name}.conv.w"] = (f, f, kernel_size)
        shapes[f"{name}.conv.b"] = (f,)
        shapes[f"{name}.q.w"] = (d, q_in, 1)
        shapes[f"{name}.q.b"] = (d,)
        shapes[f"{name}.k.w"] = (d, k_in, 1)
        shapes[f"{name}.k.b"] = (d,)
        shapes[f"{name}.v.w"] = (d, v_in, 1)
        shapes[f"{name}.v.b"] = (d,)
        shapes[f"{name}.o.w"] = (f, d, 1)
        shapes[f"{name}.o.b"] = (f,)
    n_br = len(spec.branches())
    shapes["fuse.w"] = (f, n_br * f, 1)
    shapes["fuse.b"] = (f,)
    return shapes


def _project(x, params, key):
    return tn.transpose(tn.conv1d(x, params[f"{key}.w"], params[f"{key}.b"]))


def branch_forward(x, cross, name, window, spec, params, pad_mask):
    """One dilated-conv + windowed-attention branch; returns ``[F, T]``."""
    h = tn.relu(tn.conv1d(x, params[f"{name}.conv.w"], params[f"{name}.conv.b"], dilation=window))
    h = tn.mask_frames(h, pad_mask)
    # normalize what attention sees; the conv and the residual keep raw scale
    hs = tn.instance_norm(h, pad_mask)
    if spec.role == "decoder":
        mixed = tn.concat([hs, cross], axis=0)
        q_src = mixed
        k_src = mixed if spec.cross_qv_mode == "qk" else hs
        v_src = hs if spec.cross_qv_mode == "qk" else mixed
    else:
        q_src = k_src = v_src = hs
    att = windowed_attention(
        AttentionInput(
            _project(q_src, params, f"{name}.q"),
            _project(k_src, params, f"{name}.k"),
            _project(v_src, params, f"{name}.v"),
            pad_mask,
        ),
        window,
    )
    a = tn.conv1d(tn.transpose(att), params[f"{name}.o.w"], params[f"{name}.o.b"])
    return tn.mask_frames(tn.add(h, a), pad_mask)


def dropout(x, p, rng, channels=False):
    """Inverted dropout with a caller-supplied generator; ``channels`` drops whole rows of ``[C, T]``."""
    if rng is None or p <= 0:
        return x
    shape = (x.shape[0], 1) if channels else x.shape
    keep = (rng.random(shape) >= p).astype(x.dtype) / (1.0 - p)
    return tn.mul(x, Tensor(np.broadcast_to(keep, x.shape).copy()))


def da_block_forward(x, cross, spec, params, pad_mask=None, rng=None, drop=0.0):
    """Dual dilated attention block: ``x[F, T]`` (+ ``cross[F, T]`` for decoders) -> ``[F, T]``.

    ``params`` maps the names from :func:`block_param_shapes` to Tensors.
    With a training ``rng``, dropout at rate ``drop`` hits the fused branch
    output before the residual add.
    """
    if spec.role == "decoder":
        if cross is None:
            raise WiringError(f"decoder block {spec.block_index} needs a cross input")
        if cross.shape != x.shape:
            raise DimensionError(f"cross shape {cross.shape} differs from block input {x.shape}")
    elif cross is not None:
        raise WiringError(f"encoder block {spec.block_index} takes no cross input")
    x = tn.mask_frames(x, pad_mask)
    outs = [branch_forward(x, cross, name, w, spec, params, pad_mask) for name, w in spec.branches()]
    merged = outs[0] if len(outs) == 1 else tn.concat(outs, axis=0)
    fused = dropout(tn.conv1d(merged, params["fuse.w"], params["fuse.b"]), drop, rng)
    return tn.mask_frames(tn.add(x, fused), pad_mask)
