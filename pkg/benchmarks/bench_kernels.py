"""Compare the compiled and numpy kernel backends.

Times im2col/col2im and max pooling on typical mini-model shapes, plus one
forward/backward pass of the mini rcan_densenet, under each available backend.
Also confirms the two backends agree bit-for-bit on every benchmarked call.

Usage::

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from cellattn import functional as F
from cellattn import kernels
from cellattn.models import build_model, mini_config
from cellattn.tensor import Tensor, gradient

CASES = [
    # name, input shape, kernel, stride, pad
    ("stem conv 7x7/2", (16, 3, 96, 96), 7, 2, 3),
    ("conv 3x3", (16, 32, 24, 24), 3, 1, 1),
    ("conv 3x3", (16, 64, 12, 12), 3, 1, 1),
    ("conv 1x1", (16, 128, 12, 12), 1, 1, 0),
]
POOLS = [((16, 32, 48, 48), 2, 2, 0), ((16, 64, 24, 24), 3, 2, 1)]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def bench_backend(name, repeat, rng_seed=0):
    kernels.set_backend(name)
    rng = np.random.default_rng(rng_seed)
    rows, outputs = [], []
    for label, shape, k, s, p in CASES:
        x = rng.standard_normal(shape).astype(np.float32)
        t, cols = best_of(lambda: kernels.im2col(x, k, k, s, p), repeat)
        rows.append((f"im2col {label} {shape}", t))
        t2, back = best_of(lambda: kernels.col2im(cols, x.shape, k, k, s, p), repeat)
        rows.append((f"col2im {label} {shape}", t2))
        outputs += [cols, back]
    for shape, k, s, p in POOLS:
        x = rng.standard_normal(shape).astype(np.float32)
        t, (out, arg) = best_of(lambda: kernels.maxpool_forward(x, k, s, p), repeat)
        rows.append((f"maxpool fwd {k}x{k}/{s} {shape}", t))
        g = np.ones_like(out)
        t2, gx = best_of(lambda: kernels.maxpool_backward(g, arg, x.shape, k, s, p), repeat)
        rows.append((f"maxpool bwd {k}x{k}/{s} {shape}", t2))
        outputs += [out, gx]

    model = build_model(mini_config("rcan_densenet"))
    x = Tensor(rng.standard_normal((16,) + model.input_shape).astype(np.float32))
    labels = np.arange(16) % 5

    def step():
        loss = F.cross_entropy_with_logits(model.logits(x), labels)
        return gradient(loss, model.parameters())

    t, grads = best_of(step, max(1, repeat // 2))
    rows.append(("rcan_densenet train step (batch 16)", t))
    outputs += list(grads)
    return rows, outputs


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    backends = kernels.available_backends()
    prev = kernels.backend()
    results = {}
    try:
        for name in backends:
            results[name] = bench_backend(name, args.repeat)
    finally:
        kernels.set_backend(prev)

    if "cython" not in results:
        print("compiled kernels not built; showing the numpy backend only")
    labels = [label for label, _ in results[backends[0]][0]]
    header = f"{'case':<52}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for i, label in enumerate(labels):
        times = [results[b][0][i][1] for b in backends]
        line = f"{label:<52}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(backends) == 2:
            line += f"{results['python'][0][i][1] / results['cython'][0][i][1]:>9.2f}x"
        print(line)
    if len(backends) == 2:
        same = all(a.tobytes() == b.tobytes() for a, b in zip(results["cython"][1], results["python"][1]))
        print(f"backends bit-identical: {same}")


if __name__ == "__main__":
    main()
