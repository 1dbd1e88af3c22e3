"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Times each kernel directly (no routing), then one forward+backward pass of
a small model with the backend switched globally; there ``kernels`` sends
large attention windows to numpy either way. Prints one line per case with
the best time over ``--repeat`` runs and the speedup of the compiled backend.
"""
import argparse
import timeit

import numpy as np

from dxformer import _kernels_py, kernels
from dxformer import tensor as tn
from dxformer.model import ModelConfig, as_tensors, dxformer_forward, init_params
from dxformer.tensor import Tensor
from dxformer.training import seg_loss


def kernel_cases(rng):
    c, t, k, dil = 64, 1000, 3, 8
    x = rng.standard_normal((c, t)).astype(np.float32)
    w = rng.standard_normal((c, c, k)).astype(np.float32)
    b = rng.standard_normal(c).astype(np.float32)
    g = rng.standard_normal((c, t)).astype(np.float32)
    d = 8
    q, kk, v = (rng.standard_normal((t, d)).astype(np.float32) for _ in range(3))
    mask = np.ones(t, bool)
    mask[-37:] = False
    ga = rng.standard_normal((t, d)).astype(np.float32)

    def attn_fwd(win):
        return lambda m: (lambda: m.attention_forward(q, kk, v, mask, win))

    def attn_back(win):
        def make(m):
            _, probs = m.attention_forward(q, kk, v, mask, win)
            return lambda: m.attention_backward(ga, q, kk, v, probs, win)
        return make

    cases = {
        f"conv1d_forward C={c} T={t} K={k} d={dil}": lambda m: (lambda: m.conv1d_forward(x, w, b, dil)),
        f"conv1d_backward C={c} T={t} K={k} d={dil}": lambda m: (lambda: m.conv1d_backward(g, x, w, dil)),
    }
    for win in (4, 64):
        cases[f"attention_forward T={t} d={d} w={win}"] = attn_fwd(win)
        cases[f"attention_backward T={t} d={d} w={win}"] = attn_back(win)
    return cases


def model_step(rng):
    cfg = ModelConfig(input_dim=32, num_classes=4, model_dim=32, blocks_per_stage=5, num_decoders=3)
    params = init_params(cfg)
    feats = Tensor(rng.standard_normal((32, 300)).astype(np.float32))
    labels = rng.integers(0, 4, 300)

    def step():
        p = as_tensors(params, requires_grad=True)
        tn.backward(seg_loss([s.logits for s in dxformer_forward(feats, p, cfg)], labels))

    return step


def best(fn, repeat):
    fn()  # warm up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "cython" not in kernels.available_backends():
        print("compiled backend not built; only the pure-Python timings are shown")
    rng = np.random.default_rng(0)
    modules = {"python": _kernels_py}
    if kernels._compiled is not None:
        modules["cython"] = kernels._compiled
    print(f"{'case':<46} " + " ".join(f"{n:>10}" for n in modules) + "   speedup")
    rows = [(name, {n: best(make(m), args.repeat) for n, m in modules.items()})
            for name, make in kernel_cases(rng).items()]
    step = model_step(rng)
    timings = {}
    for n in modules:
        with kernels.use_backend(n):
            timings[n] = best(step, args.repeat)
    rows.append(("model fwd+bwd F=32 N=5 3 dec T=300", timings))
    for name, t in rows:
        speed = f"{t['python'] / t['cython']:8.2f}x" if "cython" in t else ""
        print(f"{name:<46} " + " ".join(f"{t[n] * 1e3:8.2f}ms" for n in modules) + f"  {speed}")


if __name__ == "__main__":
    main()
