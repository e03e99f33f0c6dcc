"""Time the compiled and NumPy convolution kernels on network-sized workloads.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--threads T]
"""
import argparse
import time

import numpy as np

from mkisnet import backend

# (batch, cin, cout, size, kernel, stride, padding), shapes met in a 64x64 forward pass
CASES = [
    ("input 3x3", (4, 3, 12, 64, 3, 1, 1)),
    ("input 11x11", (4, 3, 12, 64, 11, 1, 5)),
    ("block 5x5", (4, 24, 24, 32, 5, 1, 2)),
    ("block 3x3 s2", (4, 24, 24, 32, 3, 2, 1)),
]


def _time(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(kernels, case, repeat, threads):
    b, cin, cout, size, k, stride, pad = case
    rng = np.random.default_rng(0)
    x = rng.standard_normal((b, cin, size, size)).astype(np.float32)
    w = rng.standard_normal((cout, cin, k, k)).astype(np.float32)
    y = kernels.conv2d_forward(x, w, stride, pad, threads)
    g = np.ascontiguousarray(rng.standard_normal(y.shape).astype(np.float32))
    return {
        "forward": _time(lambda: kernels.conv2d_forward(x, w, stride, pad, threads), repeat),
        "grad_input": _time(lambda: kernels.conv2d_backward_input(g, w, stride, pad, size, size, threads), repeat),
        "grad_weight": _time(lambda: kernels.conv2d_backward_weight(g, x, stride, pad, k, k, threads), repeat),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    if backend.compiled_kernels is None:
        print("compiled kernels are not built; only the NumPy backend is available")
    print(f"{'case':<14}{'pass':<13}{'cython ms':>11}{'numpy ms':>11}{'speedup':>9}")
    for name, case in CASES:
        py = bench(backend.python_kernels, case, args.repeat, args.threads)
        cy = bench(backend.compiled_kernels, case, args.repeat, args.threads) if backend.compiled_kernels else None
        for op, t_py in py.items():
            if cy is None:
                print(f"{name:<14}{op:<13}{'-':>11}{t_py * 1e3:>11.2f}{'-':>9}")
            else:
                t_cy = cy[op]
                print(f"{name:<14}{op:<13}{t_cy * 1e3:>11.2f}{t_py * 1e3:>11.2f}{t_py / t_cy:>8.1f}x")


if __name__ == "__main__":
    main()
