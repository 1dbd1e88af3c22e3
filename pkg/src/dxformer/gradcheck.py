"""64-bit central-difference checks for each differentiable component.

Ops and single blocks are checked coordinate by coordinate with
:func:`tensor.grad_check`. The full model has a few thousand parameters,
so it is checked along random directions through the whole parameter
vector (which touches every coordinate at once) plus a sample of single
coordinates.

The segmentation loss detaches the previous frame in its smoothing term,
so its gradient is compared with differences of the loss whose
previous-frame log-probabilities are frozen at the base point.

Key biases are left out of coordinate checks: adding a constant to every
key shifts all scores of a query equally, the softmax cancels it, and the
exact gradient is zero, where a relative error means nothing.
"""
import math

import numpy as np

from . import oracles
from . import tensor as tn
from .attention import AttentionInput, BlockSpec, block_param_shapes, da_block_forward, windowed_attention
from .model import ModelConfig, as_tensors, dxformer_forward, init_params
from .tensor import Tensor

OP_TOLERANCE = 1e-5
MODEL_TOLERANCE = 1e-4

TOY_MODEL = dict(input_dim=3, num_classes=3, model_dim=4, blocks_per_stage=3, num_decoders=1)


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def _rel_err(a, n):
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def _weighted(r, shape):
    w = _t(r.standard_normal(shape))
    return lambda y: tn.sum(tn.mul(y, w))


def _op_cases(r):
    """``name -> (f, x)``; constants are drawn once so ``f`` is a fixed function."""
    n = lambda *s: _t(r.standard_normal(s))  # noqa: E731
    cases = {}

    b, red = n(3, 2), _weighted(r, (4, 2))
    cases["matmul"] = (lambda x: red(tn.matmul(x, b)), n(4, 3))
    w, bias, red_c = n(2, 3, 3), n(2), _weighted(r, (2, 9))
    cases["conv1d"] = (lambda x: red_c(tn.conv1d(x, w, bias, 2)), n(3, 9))
    red_s = _weighted(r, (4, 5))
    cases["softmax"] = (lambda x: red_s(tn.softmax(x, axis=0)), n(4, 5))
    red_l = _weighted(r, (4, 5))
    cases["log_softmax"] = (lambda x: red_l(tn.log_softmax(x, axis=1)), n(4, 5))
    red_r = _weighted(r, (3, 6))
    cases["relu"] = (lambda x: red_r(tn.relu(x)), n(3, 6))
    c1, c2, c3 = n(3, 4), n(3, 4), n(3, 4)
    cases["add"] = (lambda x: tn.sum(tn.mul(tn.add(x, c1), x)), n(3, 4))
    cases["sub"] = (lambda x: tn.sum(tn.mul(tn.sub(c2, x), x)), n(3, 4))
    cases["mul"] = (lambda x: tn.sum(tn.mul(x, c3)), n(3, 4))
    red_sc = _weighted(r, (3, 4))
    cases["scale"] = (lambda x: red_sc(tn.scale(x, -1.5)), n(3, 4))
    red_cc = _weighted(r, (2, 6))
    cases["concat"] = (lambda x: red_cc(tn.concat([x, tn.scale(x, 2.0)], axis=1)), n(2, 3))
    red_n = _weighted(r, (3, 3))
    cases["narrow"] = (lambda x: red_n(tn.narrow(x, 1, 1, 4)), n(3, 5))
    red_t = _weighted(r, (4, 3))
    cases["transpose"] = (lambda x: red_t(tn.transpose(x)), n(3, 4))
    cases["sum_mean"] = (lambda x: tn.add(tn.mean(tn.mul(x, x)), tn.sum(x)), n(3, 4))
    cases["clamp_max"] = (lambda x: tn.sum(tn.clamp_max(tn.mul(x, x), 1.0)), n(3, 4))
    mask = np.array([1, 0, 1, 1, 0], bool)
    red_m = _weighted(r, (3, 5))
    cases["mask_frames"] = (lambda x: red_m(tn.mask_frames(x, mask)), n(3, 5))
    red_i = _weighted(r, (3, 7))
    imask = np.array([1, 1, 1, 1, 1, 0, 0], bool)
    cases["instance_norm"] = (lambda x: red_i(tn.instance_norm(x, imask)), n(3, 7))
    k, v, amask, red_a = n(7, 3), n(7, 3), np.array([1, 1, 1, 0, 1, 1, 1], bool), _weighted(r, (7, 3))
    cases["windowed_attention"] = (lambda x: red_a(windowed_attention(AttentionInput(x, k, v, amask), 2)), n(7, 3))
    return cases


def check_ops(seeds=range(20)):
    """Max relative error per op over ``seeds``."""
    worst = {}
    for seed in seeds:
        for name, (f, x) in _op_cases(np.random.default_rng(seed)).items():
            worst[name] = max(worst.get(name, 0.0), tn.grad_check(f, x))
    return worst


def check_block(role, seed, f=4, t=8, n=3, i=2):
    """Max relative error of one DA block w.r.t. its input, cross input and every parameter."""
    r = np.random.default_rng(seed)
    spec = BlockSpec(i, n, role)
    params = {k: r.standard_normal(s) * 0.5 for k, s in block_param_shapes(f, spec).items()}
    x = r.standard_normal((f, t))
    cross = r.standard_normal((f, t)) if role == "decoder" else None
    wout = _t(r.standard_normal((f, t)))

    def make(which):
        def fn(z):
            p = {k: _t(v) for k, v in params.items()}
            xx, cc = _t(x), None if cross is None else _t(cross)
            if which == "x":
                xx = z
            elif which == "cross":
                cc = z
            else:
                p[which] = z
            return tn.sum(tn.mul(da_block_forward(xx, cc, spec, p), wout))
        return fn

    worst = 0.0
    targets = {"x": x, **({"cross": cross} if cross is not None else {}), **params}
    for which, base in targets.items():
        if which.endswith(".k.b"):
            continue
        worst = max(worst, tn.grad_check(make(which), _t(base)))
    return worst


def _model_loss(cfg, params, feats, labels):
    from .training import seg_loss

    stages = dxformer_forward(feats, params, cfg)
    return seg_loss([s.logits for s in stages], labels)


def _model_logits(cfg, params, feats):
    return [s.logits.data for s in dxformer_forward(feats, params, cfg)]


def check_model(seed, t=8, directions=4, coords=16, eps=1e-5, **cfg_overrides):
    """Max relative error of the full model loss (toy size by default) for one seed."""
    cfg = ModelConfig(**{**TOY_MODEL, "seed": seed, **cfg_overrides})
    r = np.random.default_rng(seed)
    params = init_params(cfg, np.float64)
    # spread weights a bit so activations are not all tiny
    params = {k: v * 2.0 if not k.endswith(".b") else r.standard_normal(v.shape) * 0.1 for k, v in params.items()}
    feats = r.standard_normal((cfg.input_dim, t))
    labels = r.integers(0, cfg.num_classes, t)

    tp = as_tensors(params, requires_grad=True)
    tf = Tensor(feats.copy(), requires_grad=True)
    tn.backward(_model_loss(cfg, tp, tf, labels))
    names = list(params)
    analytic = {k: tp[k].grad for k in names}
    analytic["@features"] = tf.grad
    values = {**params, "@features": feats}

    # the smoothing term detaches the previous frame, so differences are
    # taken on the loss with those log-probabilities frozen at the base point
    anchors = [oracles.log_softmax_columns(z) for z in _model_logits(cfg, as_tensors(params), _t(feats))]

    def loss_at(vals):
        p = {k: _t(vals[k]) for k in names}
        logits = _model_logits(cfg, p, _t(vals["@features"]))
        return oracles.seg_loss_reference(logits, labels, anchors=anchors)

    worst = 0.0
    for _ in range(directions):
        direction = {k: r.standard_normal(v.shape) for k, v in values.items()}
        norm = math.sqrt(sum(float((d * d).sum()) for d in direction.values()))
        direction = {k: d / norm for k, d in direction.items()}
        hi = loss_at({k: values[k] + eps * direction[k] for k in values})
        lo = loss_at({k: values[k] - eps * direction[k] for k in values})
        numeric = (hi - lo) / (2 * eps)
        a = sum(float((analytic[k] * direction[k]).sum()) for k in values)
        worst = max(worst, _rel_err(a, numeric))
    candidates = [k for k in values if not k.endswith(".k.b")]
    for _ in range(coords):
        k = candidates[int(r.integers(len(candidates)))]
        idx = int(r.integers(values[k].size))
        shifted = {}
        for sign in (1, -1):
            buf = values[k].copy().reshape(-1)
            buf[idx] += sign * eps
            shifted[sign] = loss_at({**values, k: buf.reshape(values[k].shape)})
        numeric = (shifted[1] - shifted[-1]) / (2 * eps)
        worst = max(worst, _rel_err(float(analytic[k].reshape(-1)[idx]), numeric))
    return worst


def check_seg_loss(seed, t=6, c=3, eps=1e-5):
    """Loss gradient w.r.t. two stages of logits against the frozen-anchor reference."""
    from .training import seg_loss

    r = np.random.default_rng(seed)
    logits = [r.standard_normal((c, t)) * 1.5 for _ in range(2)]
    labels = r.integers(0, c, t)
    probes = [Tensor(z.copy(), requires_grad=True) for z in logits]
    tn.backward(seg_loss(probes, labels))
    anchors = [oracles.log_softmax_columns(z) for z in logits]
    worst = 0.0
    for s, z in enumerate(logits):
        for idx in range(z.size):
            vals = []
            for sign in (1, -1):
                moved = [a.copy() for a in logits]
                moved[s].reshape(-1)[idx] += sign * eps
                vals.append(oracles.seg_loss_reference(moved, labels, anchors=anchors))
            numeric = (vals[0] - vals[1]) / (2 * eps)
            worst = max(worst, _rel_err(float(probes[s].grad.reshape(-1)[idx]), numeric))
    return worst


def run_suite(seeds=range(20)):
    """Component name -> max relative error over ``seeds``."""
    seeds = list(seeds)
    report = dict(check_ops(seeds))
    report["da_block_encoder"] = max(check_block("encoder", s) for s in seeds[:3])
    report["da_block_decoder"] = max(check_block("decoder", s) for s in seeds[:3])
    report["seg_loss"] = max(check_seg_loss(s) for s in seeds)
    report["model"] = max(check_model(s) for s in seeds)
    return report


def tolerance(component):
    return MODEL_TOLERANCE if component == "model" else OP_TOLERANCE
