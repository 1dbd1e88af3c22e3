"""The compiled kernels against their numpy twins, called directly (no routing)."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dxformer import _kernels_py, kernels

compiled = pytest.importorskip("dxformer._kernels")

DTYPES = [(np.float64, 1e-12), (np.float32, 2e-5)]


@settings(max_examples=60, deadline=None)
@given(cin=st.integers(1, 5), cout=st.integers(1, 5), t=st.integers(1, 40), k=st.sampled_from([1, 3, 5]),
       dilation=st.sampled_from([1, 2, 4, 16, 64]), seed=st.integers(0, 2**16), dt=st.sampled_from(DTYPES))
def test_conv1d_twins(cin, cout, t, k, dilation, seed, dt):
    dtype, tol = dt
    r = np.random.default_rng(seed)
    x = r.standard_normal((cin, t)).astype(dtype)
    w = r.standard_normal((cout, cin, k)).astype(dtype)
    b = r.standard_normal(cout).astype(dtype)
    g = r.standard_normal((cout, t)).astype(dtype)
    np.testing.assert_allclose(compiled.conv1d_forward(x, w, b, dilation),
                               _kernels_py.conv1d_forward(x, w, b, dilation), atol=tol * 10, rtol=tol)
    for a, e in zip(compiled.conv1d_backward(g, x, w, dilation), _kernels_py.conv1d_backward(g, x, w, dilation)):
        np.testing.assert_allclose(a, e, atol=tol * 10, rtol=tol)


@settings(max_examples=80, deadline=None)
@given(t=st.integers(1, 90), d=st.integers(1, 20), window=st.sampled_from([1, 2, 3, 8, 16, 64, 128]),
       pad=st.floats(0.0, 0.6), seed=st.integers(0, 2**16), dt=st.sampled_from(DTYPES))
def test_attention_twins(t, d, window, pad, seed, dt):
    dtype, tol = dt
    r = np.random.default_rng(seed)
    q, k, v, g = (r.standard_normal((t, d)).astype(dtype) for _ in range(4))
    mask = (r.random(t) >= pad).astype(np.uint8)
    out_c, probs_c = compiled.attention_forward(q, k, v, mask, window)
    out_p, probs_p = _kernels_py.attention_forward(q, k, v, mask.astype(bool), window)
    np.testing.assert_allclose(out_c, out_p, atol=tol * 10, rtol=tol)
    np.testing.assert_allclose(probs_c, probs_p, atol=tol * 10, rtol=tol)
    assert ((probs_c == 0) == (probs_p == 0)).all()
    for a, e in zip(compiled.attention_backward(g, q, k, v, probs_p, window),
                    _kernels_py.attention_backward(g, q, k, v, probs_p, window)):
        np.testing.assert_allclose(a, e, atol=tol * 10, rtol=tol)


def test_routing_does_not_change_results():
    r = np.random.default_rng(0)
    t, d = 200, 16
    q, k, v, g = (r.standard_normal((t, d)) for _ in range(4))
    mask = np.ones(t, bool)
    mask[-7:] = False
    for window in (2, 8, 32):
        outs = []
        for name in kernels.available_backends():
            with kernels.use_backend(name):
                out, probs = kernels.attention_forward(q, k, v, mask, window)
                outs.append((out, *kernels.attention_backward(g, q, k, v, probs, window)))
        for a, b in zip(*outs):
            np.testing.assert_allclose(a, b, atol=1e-12)
