"""Benchmark the conv2d hot kernels: numba JIT vs the pure-numpy fallback.

Runs forward, input-gradient, and kernel-gradient at a few sizes and prints
a table with the speedups.  Both implementations are imported directly, so
this does not depend on UNCERTAIN_BACKEND.

    python benchmarks/bench_conv.py [--repeats N]
"""
import argparse
import time

import numpy as np

from uncertain import backend

CASES = [
    ("small", (4, 16, 16, 4), (3, 3, 4, 8), 1),
    ("medium", (8, 32, 32, 8), (3, 3, 8, 16), 1),
    ("strided", (8, 32, 32, 8), (5, 5, 8, 16), 2),
]


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_case(name, xshape, kshape, stride, repeats):
    rng = np.random.default_rng(0)
    xp = rng.normal(size=xshape)
    k = rng.normal(size=kshape)
    out = backend._conv2d_forward_numpy(xp, k, stride)
    adj = rng.normal(size=out.shape)
    hp, wp = xshape[1], xshape[2]
    kh, kw = kshape[0], kshape[1]

    jobs = {
        "forward": (
            lambda: backend._conv2d_forward_numba(xp, k, stride),
            lambda: backend._conv2d_forward_numpy(xp, k, stride),
        ),
        "grad_input": (
            lambda: backend._conv2d_grad_input_numba(adj, k, stride, hp, wp),
            lambda: backend._conv2d_grad_input_numpy(adj, k, stride, hp, wp),
        ),
        "grad_kernel": (
            lambda: backend._conv2d_grad_kernel_numba(xp, adj, kh, kw, stride),
            lambda: backend._conv2d_grad_kernel_numpy(xp, adj, kh, kw, stride),
        ),
    }
    for job, (fast, slow) in jobs.items():
        fast()  # trigger JIT compilation outside the timed region
        t_numba = timeit(fast, repeats)
        t_numpy = timeit(slow, repeats)
        print(f"{name:8s} {job:12s} numba {t_numba * 1e3:9.3f} ms   "
              f"numpy {t_numpy * 1e3:9.3f} ms   "
              f"ratio numpy/numba {t_numpy / t_numba:6.2f}x")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    if not backend._HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"active backend: {backend.BACKEND}")
    for name, xshape, kshape, stride in CASES:
        bench_case(name, xshape, kshape, stride, args.repeats)


if __name__ == "__main__":
    main()
