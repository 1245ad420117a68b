"""Timing comparison of the pure-NumPy and compiled kernel backends.

Run from the repository root:

    python3 benchmarks/bench_kernels.py [--repeats 200] [--rows 512] [--cols 512]

Each kernel is timed on C-contiguous float64 inputs of the given shape; the
reported figure is the best-of-5 mean microseconds per call, which damps
scheduler noise without hiding systematic differences.
"""

import argparse
import time

import numpy as np

from visflow.kernels import available_backends, load_backend


def _time_call(fn, repeats):
    best = float("inf")
    for _ in range(5):
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best * 1e6


def make_cases(rows, cols, rng):
    scores = rng.standard_normal((rows, cols))
    mask = np.asarray(np.tril(np.ones((rows, cols))), dtype=np.uint8)
    probs_seed = rng.standard_normal((rows, cols))
    grad = rng.standard_normal((rows, cols))
    x = rng.standard_normal((rows, cols))
    gain = rng.standard_normal(cols)
    bias = rng.standard_normal(cols)

    def cases(backend):
        probs = backend.masked_softmax(probs_seed, mask)
        _, xhat, inv_std = backend.layernorm(x, gain, bias, 1e-5)
        return [
            ("masked_softmax", lambda: backend.masked_softmax(scores, mask)),
            ("masked_softmax_grad",
             lambda: backend.masked_softmax_grad(probs, grad, mask)),
            ("layernorm", lambda: backend.layernorm(x, gain, bias, 1e-5)),
            ("layernorm_grad",
             lambda: backend.layernorm_grad(grad, xhat, inv_std, gain)),
            ("gelu", lambda: backend.gelu(x)),
            ("gelu_grad", lambda: backend.gelu_grad(x, grad)),
        ]

    return cases


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=200)
    parser.add_argument("--rows", type=int, default=512)
    parser.add_argument("--cols", type=int, default=512)
    args = parser.parse_args()

    backends = available_backends()
    cases = make_cases(args.rows, args.cols, np.random.default_rng(0))

    results = {}
    for name in backends:
        backend = load_backend(name)
        results[name] = {
            kernel: _time_call(fn, args.repeats) for kernel, fn in cases(backend)
        }

    width = max(len(k) for k in next(iter(results.values())))
    header = f"{'kernel'.ljust(width)}  " + "  ".join(f"{b:>12}" for b in backends)
    if len(backends) > 1:
        header += f"  {'speedup':>8}"
    print(f"shape ({args.rows}, {args.cols}), microseconds per call")
    print(header)
    for kernel in results[backends[0]]:
        row = f"{kernel.ljust(width)}  "
        row += "  ".join(f"{results[b][kernel]:12.1f}" for b in backends)
        if len(backends) > 1:
            row += f"  {results[backends[0]][kernel] / results[backends[-1]][kernel]:7.2f}x"
        print(row)


if __name__ == "__main__":
    main()
