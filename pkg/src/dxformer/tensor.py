"""A small dense-tensor engine with reverse-mode autodiff.

Sequence tensors are channel-first ``[C, T]``. There is no general
broadcasting: binary elementwise ops require equal shapes, and the only
implicit expansion is the per-channel bias inside :func:`conv1d`.

Every op that has at least one ``requires_grad`` input records a node
carrying a global sequence number. :func:`backward` collects the nodes
reachable from the loss into an :class:`AutodiffTape` and replays them in
reverse recorded order, so there is no shared mutable tape and separate
threads can run separate graphs.
"""
import itertools
import math

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError, DimensionError, DTypeError, GradCheckError, NumericalError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_sequence = itertools.count()


class _Node:
    __slots__ = ("seq", "op", "inputs", "backward", "out_id")

    def __init__(self, op, inputs, backward, out_id):
        self.seq = next(_sequence)
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.out_id = out_id


class Tensor:
    """Dense float32/float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES else np.float32
        dtype = np.dtype(dtype)
        if dtype not in FLOAT_DTYPES:
            raise DTypeError(f"unsupported dtype {dtype}; use float32 or float64")
        arr = np.ascontiguousarray(data, dtype=dtype)
        if 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    @classmethod
    def _wrap(cls, arr, requires_grad):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def detach(self):
        return detach(self)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _record(data, op, inputs, backward_fn):
    if not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs_grad)
    if needs_grad:
        out._node = _Node(op, inputs, backward_fn, id(out))
    return out


def _same_dtype(op, *ts):
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise DTypeError(f"{op}: dtype mismatch {dt} vs {t.dtype}")


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# autodiff


class AutodiffTape:
    """The recorded ops reachable from one output, in recording order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def collect(cls, root):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t._node
            if node is None or node.seq in seen:
                continue
            seen.add(node.seq)
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [n.op for n in self.nodes]

    def replay(self, root, seed):
        grads = {id(root): seed}
        if root._node is None and root.requires_grad:
            _accumulate_leaf(root, seed)
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            input_grads = node.backward(g)
            for t, gi in zip(node.inputs, input_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    _accumulate_leaf(t, gi)
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi


def _accumulate_leaf(t, g):
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True).reshape(t.shape)
    else:
        t.grad = t.grad + g


def backward(loss):
    """Accumulate dloss/dleaf into ``.grad`` of every ``requires_grad`` leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = AutodiffTape.collect(loss)
    tape.replay(loss, np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# ops


def detach(x):
    return Tensor._wrap(x.data, False)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    _same_dtype("matmul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, "matmul", (a, b), back)


def conv1d(x, w, bias, dilation=1):
    """Same-padded dilated 1-D convolution of ``x[C_in, T]`` with ``w[C_out, C_in, K]``."""
    if x.ndim != 2 or w.ndim != 3 or bias.ndim != 1:
        raise DimensionError(f"conv1d: bad ranks x{x.shape} w{w.shape} bias{bias.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ConfigError(f"conv1d: kernel size must be odd, got {k}")
    if int(dilation) != dilation or dilation < 1:
        raise ConfigError(f"conv1d: dilation must be a positive integer, got {dilation}")
    if w.shape[1] != x.shape[0] or bias.shape[0] != w.shape[0]:
        raise DimensionError(f"conv1d: x{x.shape} incompatible with w{w.shape} bias{bias.shape}")
    _same_dtype("conv1d", x, w, bias)
    dilation = int(dilation)
    xd, wd = x.data, w.data
    out = kernels.conv1d_forward(xd, wd, bias.data, dilation)

    def back(g):
        return kernels.conv1d_backward(np.ascontiguousarray(g), xd, wd, dilation)

    return _record(out, "conv1d", (x, w, bias), back)


def _check_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x, axis=-1):
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, "softmax", (x,), back)


def log_softmax(x, axis=-1):
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(y, "log_softmax", (x,), back)


def relu(x):
    active = x.data > 0
    # subgradient at exactly 0 is 0
    return _record(np.where(active, x.data, 0).astype(x.dtype, copy=False), "relu", (x,),
                   lambda g: (g * active,))


def add(a, b):
    _same_shape("add", a, b)
    _same_dtype("add", a, b)
    return _record(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    _same_dtype("sub", a, b)
    return _record(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape("mul", a, b)
    _same_dtype("mul", a, b)
    ad, bd = a.data, b.data
    return _record(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(x, c):
    c = float(c)
    return _record(x.data * c, "scale", (x,), lambda g: (g * c,))


def clamp_max(x, limit):
    """Elementwise ``min(x, limit)``; gradient passes only where ``x < limit``."""
    limit = float(limit)
    below = x.data < limit
    return _record(np.minimum(x.data, limit), "clamp_max", (x,), lambda g: (g * below,))


def mask_frames(x, mask):
    """Zero the time columns of ``x[C, T]`` where ``mask`` is False."""
    if mask is None:
        return x
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 2 or mask.shape != (x.shape[1],):
        raise DimensionError(f"mask_frames: mask {mask.shape} does not match {x.shape}")
    m = mask.astype(x.dtype)[None, :]
    return _record(x.data * m, "mask_frames", (x,), lambda g: (g * m,))


def concat(xs, axis=0):
    xs = list(xs)
    if not xs:
        raise DimensionError("concat: empty input list")
    axis = _check_axis(xs[0], axis)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    _same_dtype("concat", *xs)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record(np.concatenate([t.data for t in xs], axis=axis), "concat", tuple(xs), back)


def narrow(x, axis, start, stop):
    """The slice ``[start, stop)`` of ``x`` along ``axis``."""
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    if not 0 <= start < stop <= n:
        raise DimensionError(f"narrow: bad range [{start}, {stop}) for extent {n}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _record(np.ascontiguousarray(x.data[index]), "narrow", (x,), back)


def transpose(x):
    if x.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {x.shape}")
    return _record(np.ascontiguousarray(x.data.T), "transpose", (x,), lambda g: (np.ascontiguousarray(g.T),))


def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _record(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.full(shape, g, dtype=x.dtype),))


def mean(x):
    n = x.data.size
    shape = x.shape
    return _record(np.asarray(x.data.mean()), "mean", (x,),
                   lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def instance_norm(x, mask=None, eps=1e-5):
    """Normalize each channel of ``x[C, T]`` over its real (unmasked) frames."""
    if x.ndim != 2:
        raise DimensionError(f"instance_norm expects [C, T], got {x.shape}")
    if mask is None:
        m = np.ones((1, x.shape[1]), dtype=x.dtype)
    else:
        m = np.asarray(mask, dtype=x.dtype)[None, :]
    n = max(float(m.sum()), 1.0)
    xd = x.data
    mu = (xd * m).sum(axis=1, keepdims=True) / n
    centered = (xd - mu) * m
    var = (centered * centered).sum(axis=1, keepdims=True) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def back(g):
        gm = g * m
        s1 = gm.sum(axis=1, keepdims=True)
        s2 = (gm * xhat).sum(axis=1, keepdims=True)
        return ((inv / n) * (n * gm - s1 - xhat * s2) * m,)

    return _record(xhat.astype(x.dtype, copy=False), "instance_norm", (x,), back)


# ---------------------------------------------------------------------------
# verification


def grad_check(f, x, eps=1e-5, coords=None):
    """Max relative error between the analytic gradient of ``f`` at ``x`` and central differences.

    ``f`` maps a Tensor to a scalar Tensor and ``x`` must be float64. The
    per-coordinate error is ``|a - n| / max(1e-8, |a| + |n|)``. ``coords``
    optionally restricts the check to a list of flat indices.
    """
    x = as_tensor(x)
    if x.dtype != np.float64:
        raise ContractError("grad_check requires a float64 input")
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    out = f(probe)
    if out.data.size != 1:
        raise ContractError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    backward(out)
    if probe.grad is None:
        analytic = np.zeros(x.data.size)
    else:
        analytic = probe.grad.reshape(-1)
    base = x.data.reshape(-1).copy()
    indices = range(base.size) if coords is None else coords

    def value_at(buf, i):
        try:
            return float(f(Tensor(buf.reshape(x.shape), dtype=np.float64)).data)
        except NumericalError as exc:
            raise GradCheckError(f"non-finite value while perturbing coordinate {i}: {exc}") from exc

    worst = 0.0
    for i in indices:
        buf = base.copy()
        buf[i] = base[i] + eps
        hi = value_at(buf, i)
        buf[i] = base[i] - eps
        lo = value_at(buf, i)
        numeric = (hi - lo) / (2 * eps)
        a = float(analytic[i])
        if math.isnan(a) or math.isnan(numeric):
            raise GradCheckError(f"NaN gradient at coordinate {i}")
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst
