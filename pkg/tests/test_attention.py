import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dxformer import oracles
from dxformer import tensor as tn
from dxformer.attention import (
    AttentionInput,
    BlockSpec,
    block_param_shapes,
    chunk_weights_to_dense,
    da_block_forward,
    window_size,
    windowed_attention,
)
from dxformer.errors import ConfigError, DimensionError, WiringError
from dxformer.tensor import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def random_block(seed, role="encoder", f=4, n=3, i=2, mode="qk", dual=True, scale=0.5):
    r = np.random.default_rng(seed)
    spec = BlockSpec(i, n, role, dual, mode)
    shapes = block_param_shapes(f, spec)
    params = {k: r.standard_normal(s) * scale for k, s in shapes.items()}
    return spec, params, r


# ---------------------------------------------------------------------------
# window schedule


def test_window_examples():
    assert window_size("increasing", 1, 9) == 2
    assert window_size("decreasing", 1, 9) == 256
    assert window_size("decreasing", 9, 9) == 1


@pytest.mark.parametrize("n", [7, 9])
def test_window_schedule(n):
    inc = [BlockSpec(i, n).w_inc for i in range(1, n + 1)]
    dec = [BlockSpec(i, n).w_dec for i in range(1, n + 1)]
    assert inc == [2 ** i for i in range(1, n + 1)]
    assert dec == [2 ** (n - i) for i in range(1, n + 1)]
    assert {a * b for a, b in zip(inc, dec)} == {2 ** n}
    if n == 9:
        assert inc == [2, 4, 8, 16, 32, 64, 128, 256, 512]
        assert dec == [256, 128, 64, 32, 16, 8, 4, 2, 1]


def test_window_out_of_range():
    with pytest.raises(ConfigError):
        window_size("increasing", 0, 9)
    with pytest.raises(ConfigError):
        window_size("decreasing", 10, 9)
    with pytest.raises(ConfigError):
        BlockSpec(4, 3)


# ---------------------------------------------------------------------------
# windowed attention


def test_zero_queries_give_masked_mean(backend, rng):
    t, d = 7, 3
    v = rng.standard_normal((t, d))
    mask = np.array([1, 1, 0, 1, 1, 1, 0], bool)
    out = windowed_attention(AttentionInput(t64(np.zeros((t, d))), t64(rng.standard_normal((t, d))), t64(v), mask), 8)
    expected = v[mask].mean(axis=0)
    np.testing.assert_allclose(out.data[mask], np.tile(expected, (mask.sum(), 1)), atol=1e-12)
    np.testing.assert_array_equal(out.data[~mask], 0)


def test_window_one_is_identity_on_values(backend, rng):
    t, d = 9, 4
    v = rng.standard_normal((t, d))
    mask = np.ones(t, bool)
    mask[3] = False
    out = windowed_attention(AttentionInput(t64(rng.standard_normal((t, d))), t64(rng.standard_normal((t, d))),
                                            t64(v), mask), 1)
    np.testing.assert_allclose(out.data[mask], v[mask], atol=1e-15)
    np.testing.assert_array_equal(out.data[3], 0)


def test_seed42_example_matches_dense_oracle(backend):
    r = np.random.default_rng(42)
    q, k, v = (r.standard_normal((6, 4)) for _ in range(3))
    out = windowed_attention(AttentionInput(t64(q), t64(k), t64(v)), 2)
    ref, _ = oracles.dense_masked_attention(q, k, v, None, 2)
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def oracle_case(r):
    t = int(r.integers(1, 65))
    w = int(r.choice([1, 2, 4, 8, 16]))
    d = int(r.integers(1, 9))
    q, k, v = (r.standard_normal((t, d)) for _ in range(3))
    mask = r.random(t) > 0.2
    return t, w, q, k, v, mask


def test_chunked_attention_matches_dense_oracle_200_cases(backend):
    r = np.random.default_rng(0)
    for _ in range(200):
        t, w, q, k, v, mask = oracle_case(r)
        out, probs = windowed_attention(AttentionInput(t64(q), t64(k), t64(v), mask), w, return_weights=True)
        ref, ref_w = oracles.dense_masked_attention(q, k, v, mask, w)
        assert np.abs(out.data - ref).max() <= 1e-6
        dense = chunk_weights_to_dense(probs, t)
        np.testing.assert_allclose(dense, ref_w, atol=1e-12)
        chunk = np.arange(t) // min(w, t)
        forbidden = (chunk[:, None] != chunk[None, :]) | ~mask[None, :] | ~mask[:, None]
        assert (dense[forbidden] == 0).all()


def test_float32_matches_oracle(backend):
    r = np.random.default_rng(3)
    for _ in range(20):
        t, w, q, k, v, mask = oracle_case(r)
        out = windowed_attention(AttentionInput(*(Tensor(a.astype(np.float32)) for a in (q, k, v)), mask), w)
        assert out.dtype == np.float32
        ref, _ = oracles.dense_masked_attention(q.astype(np.float32), k.astype(np.float32), v.astype(np.float32),
                                                mask, w)
        assert np.abs(out.data - ref).max() <= 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_large_window_is_bitwise_dense(t, extra, seed):
    r = np.random.default_rng(seed)
    d = 3
    q, k, v = (r.standard_normal((t, d)) for _ in range(3))
    w = t + extra
    scores = q @ k.T / math.sqrt(d)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    expected = (e / e.sum(axis=-1, keepdims=True)) @ v
    from dxformer import kernels

    for name in kernels.available_backends():
        with kernels.use_backend(name):
            out = windowed_attention(AttentionInput(t64(q), t64(k), t64(v)), w)
        assert out.data.tobytes() == expected.tobytes(), name


def test_attention_input_validation():
    with pytest.raises(DimensionError):
        AttentionInput(t64(np.ones((3, 2))), t64(np.ones((3, 2))), t64(np.ones((4, 2))))
    with pytest.raises(DimensionError):
        AttentionInput(t64(np.ones((3, 2))), t64(np.ones((3, 2))), t64(np.ones((3, 2))), np.ones(4, bool))
    with pytest.raises(ConfigError):
        windowed_attention(AttentionInput(t64(np.ones((3, 2))), t64(np.ones((3, 2))), t64(np.ones((3, 2)))), 0)


@pytest.mark.parametrize("w", [1, 2, 3, 8])
def test_attention_gradients(backend, w):
    for seed in range(3):
        r = np.random.default_rng(seed)
        t, d = 7, 3
        q, k, v = (r.standard_normal((t, d)) for _ in range(3))
        mask = np.array([1, 1, 1, 0, 1, 1, 0], bool)
        wout = t64(r.standard_normal((t, d)))
        for which in range(3):
            def f(x, which=which):
                args = [t64(q), t64(k), t64(v)]
                args[which] = x
                return tn.sum(tn.mul(windowed_attention(AttentionInput(*args, mask), w), wout))

            assert tn.grad_check(f, t64((q, k, v)[which])) <= 1e-5


# ---------------------------------------------------------------------------
# DA block


@pytest.mark.parametrize("role", ["encoder", "decoder"])
def test_block_shape_law(backend, role, rng):
    f, n, t = 4, 4, 11
    x = t64(rng.standard_normal((f, t)))
    cross = t64(rng.standard_normal((f, t))) if role == "decoder" else None
    for i in range(1, n + 1):
        spec, params, _ = random_block(i, role, f, n, i)
        out = da_block_forward(x, cross, spec, {k: t64(v) for k, v in params.items()})
        assert out.shape == (f, t)


def test_branch_params_have_identical_shapes():
    shapes = block_param_shapes(8, BlockSpec(2, 4, "decoder"))
    inc = {k[4:]: s for k, s in shapes.items() if k.startswith("inc.")}
    dec = {k[4:]: s for k, s in shapes.items() if k.startswith("dec.")}
    assert inc == dec
    assert shapes["fuse.w"] == (8, 16, 1)
    assert shapes["inc.conv.w"] == (8, 8, 3)
    assert shapes["inc.q.w"] == (4, 16, 1) and shapes["inc.k.w"] == (4, 16, 1) and shapes["inc.v.w"] == (4, 8, 1)


def test_qv_mode_swaps_key_and_value_sources():
    shapes = block_param_shapes(8, BlockSpec(2, 4, "decoder", cross_qv_mode="qv"))
    assert shapes["inc.k.w"] == (4, 8, 1) and shapes["inc.v.w"] == (4, 16, 1)


@pytest.mark.parametrize("role", ["encoder", "decoder"])
def test_zero_fusion_is_identity(backend, role, rng):
    spec, params, r = random_block(0, role)
    params["fuse.w"][:] = 0
    params["fuse.b"][:] = 0
    x = t64(r.standard_normal((4, 9)))
    cross = t64(r.standard_normal((4, 9))) if role == "decoder" else None
    out = da_block_forward(x, cross, spec, {k: t64(v) for k, v in params.items()})
    np.testing.assert_array_equal(out.data, x.data)


def test_wiring_errors(rng):
    x = t64(rng.standard_normal((4, 5)))
    spec, params, _ = random_block(0, "decoder")
    p = {k: t64(v) for k, v in params.items()}
    with pytest.raises(WiringError):
        da_block_forward(x, None, spec, p)
    with pytest.raises(DimensionError):
        da_block_forward(x, t64(np.ones((4, 6))), spec, p)
    spec, params, _ = random_block(0, "encoder")
    with pytest.raises(WiringError):
        da_block_forward(x, x, spec, {k: t64(v) for k, v in params.items()})


def _ref_conv(x, w, b, dil):
    f_out, f_in, k = w.shape
    t = x.shape[1]
    out = np.tile(b[:, None], (1, t)).astype(np.float64)
    for tap in range(k):
        shift = dil * (tap - k // 2)
        for s in range(t):
            if 0 <= s + shift < t:
                out[:, s] += w[:, :, tap] @ x[:, s + shift]
    return out


def _ref_norm(x, mask):
    m = mask.astype(float)
    n = m.sum()
    mu = (x * m).sum(axis=1, keepdims=True) / n
    c = (x - mu) * m
    return c / np.sqrt((c * c).sum(axis=1, keepdims=True) / n + 1e-5)


def reference_single_branch_block(x, cross, spec, params, mask):
    """Plain-numpy block that runs only branch ``inc`` and fuses with the first half of ``fuse.w``."""
    f = x.shape[0]
    w = spec.w_inc
    h = np.maximum(_ref_conv(x, params["inc.conv.w"], params["inc.conv.b"], w), 0) * mask
    hn = _ref_norm(h, mask)
    src = np.concatenate([hn, cross]) if cross is not None else hn
    proj = lambda a, key: (params[f"{key}.w"][:, :, 0] @ a + params[f"{key}.b"][:, None]).T  # noqa: E731
    q = proj(src, "inc.q")
    k = proj(src if cross is not None and spec.cross_qv_mode == "qk" else hn, "inc.k")
    v = proj(src if cross is not None and spec.cross_qv_mode == "qv" else hn, "inc.v")
    att, _ = oracles.dense_masked_attention(q, k, v, mask, w)
    a = params["inc.o.w"][:, :, 0] @ att.T + params["inc.o.b"][:, None]
    branch = (h + a) * mask
    fused = params["fuse.w"][:, :f, 0] @ branch + params["fuse.b"][:, None]
    return (x + fused) * mask


@pytest.mark.parametrize("role,mode", [("encoder", "qk"), ("decoder", "qk"), ("decoder", "qv")])
def test_single_branch_oracle(backend, role, mode):
    for seed in range(5):
        spec, params, r = random_block(seed, role, f=4, n=3, i=1 + seed % 3, mode=mode)
        params["fuse.w"][:, 4:] = 0
        t = 13
        x = r.standard_normal((4, t))
        cross = r.standard_normal((4, t)) if role == "decoder" else None
        mask = np.ones(t, bool)
        mask[-3:] = False
        x = x * mask
        out = da_block_forward(t64(x), None if cross is None else t64(cross), spec,
                               {k: t64(v) for k, v in params.items()}, mask)
        ref = reference_single_branch_block(x, cross, spec, params, mask)
        np.testing.assert_allclose(out.data, ref, atol=1e-10)


def test_decoder_is_sensitive_to_cross(backend):
    spec, params, r = random_block(5, "decoder")
    p = {k: t64(v) for k, v in params.items()}
    x = t64(r.standard_normal((4, 10)))
    c = r.standard_normal((4, 10))
    delta = np.zeros_like(c)
    delta[1, 4] = 0.5
    a = da_block_forward(x, t64(c), spec, p).data
    b = da_block_forward(x, t64(c + delta), spec, p).data
    assert np.abs(a - b).max() > 1e-6


def test_padding_does_not_leak(backend):
    """Real frames see the same output whatever values sit in the padded tail."""
    spec, params, r = random_block(9, "decoder", n=3, i=1)
    p = {k: t64(v) for k, v in params.items()}
    t = 12
    mask = np.arange(t) < 9
    x = r.standard_normal((4, t)) * mask
    c = r.standard_normal((4, t)) * mask
    out = da_block_forward(t64(x), t64(c), spec, p, mask).data
    x2, c2 = x.copy(), c.copy()
    x2[:, 9:] = 7.0
    c2[:, 9:] = -3.0
    out2 = da_block_forward(t64(x2), t64(c2), spec, p, mask).data
    np.testing.assert_allclose(out[:, :9], out2[:, :9], atol=1e-12)
    np.testing.assert_array_equal(out[:, 9:], 0)


def _block_fn(spec, params, x, cross, which, wout, mask=None):
    def f(z):
        p = {k: t64(v) for k, v in params.items()}
        xx, cc = t64(x), None if cross is None else t64(cross)
        if which == "x":
            xx = z
        elif which == "cross":
            cc = z
        else:
            p[which] = z
        return tn.sum(tn.mul(da_block_forward(xx, cc, spec, p, mask), wout))

    return f


@pytest.mark.parametrize("role", ["encoder", "decoder"])
def test_block_gradients(backend, role):
    """Every input of a block (T=8, F=4) passes the central-difference check at 1e-5."""
    for seed in range(2):
        spec, params, r = random_block(100 + seed, role, f=4, n=3, i=2)
        x = r.standard_normal((4, 8))
        cross = r.standard_normal((4, 8)) if role == "decoder" else None
        wout = t64(r.standard_normal((4, 8)))
        targets = ["x"] + (["cross"] if cross is not None else []) + sorted(params)
        for which in targets:
            base = {"x": x, "cross": cross}.get(which, params.get(which))
            f = _block_fn(spec, params, x, cross, which, wout)
            if which.endswith(".k.b"):
                assert_zero_gradient(f, t64(base))
                continue
            err = tn.grad_check(f, t64(base))
            assert err <= 1e-5, f"{which} seed {seed}: {err}"


def assert_zero_gradient(f, x, eps=1e-5):
    """A key bias shifts every score of a query equally, so softmax cancels it exactly.

    Relative error is undefined at an exact zero, so both sides are bounded absolutely.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    tn.backward(f(probe))
    assert np.abs(probe.grad).max() <= 1e-12
    for i in range(x.data.size):
        hi, lo = x.data.copy().reshape(-1), x.data.copy().reshape(-1)
        hi[i] += eps
        lo[i] -= eps
        num = (f(t64(hi.reshape(x.shape))).item() - f(t64(lo.reshape(x.shape))).item()) / (2 * eps)
        assert abs(num) <= 1e-8


def test_key_bias_cannot_change_the_output(backend, rng):
    spec, params, r = random_block(3, "decoder")
    x, c = t64(r.standard_normal((4, 9))), t64(r.standard_normal((4, 9)))
    a = da_block_forward(x, c, spec, {k: t64(v) for k, v in params.items()}).data
    params["inc.k.b"] = params["inc.k.b"] + 3.0
    params["dec.k.b"] = params["dec.k.b"] - 2.0
    b = da_block_forward(x, c, spec, {k: t64(v) for k, v in params.items()}).data
    np.testing.assert_allclose(a, b, atol=1e-12)
