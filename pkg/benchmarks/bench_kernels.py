#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Run:  python3 benchmarks/bench_kernels.py [--repeats N]

Sizes mirror the desk-scale hot spots: a batch of 100 latents against a
2000-component pseudo-input mixture (K=500 x S=4, d=40), pixel
likelihoods over (400, 784) decoder outputs, fused Adam updates on the
biggest weight matrix, and k-means assignment over probe features.
Matmul-dominated layers are served by BLAS and are deliberately not
benchmarked here — numba does not beat BLAS at GEMM.

Set MIXVI_BACKEND=numpy to verify the package runs identically (slower)
without numba.
"""

import argparse
import time

import numpy as np

from mixvi import kernels
from mixvi.backend import USE_NUMBA, backend_name


def timeit(fn, *args, repeats=5):
    fn(*args)  # warm-up / JIT compile
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)

    cases = []

    z = rng.normal(size=(100, 40))
    mu = rng.normal(size=(2000, 40))
    lv = 0.1 * rng.normal(size=(2000, 40))
    g = rng.normal(size=(100, 2000))
    cases.append(("cross_gauss_logpdf (100x2000x40)",
                  kernels.cross_gauss_logpdf_np, kernels.cross_gauss_logpdf_nb,
                  (z, mu, lv)))
    cases.append(("cross_gauss_logpdf_grads",
                  kernels.cross_gauss_logpdf_grads_np, kernels.cross_gauss_logpdf_grads_nb,
                  (z, mu, lv, g)))

    x = (rng.random((400, 784)) < 0.5).astype(np.float64)
    logits = rng.normal(size=(400, 784))
    gb = rng.normal(size=400)
    cases.append(("bernoulli_logpdf (400x784)",
                  kernels.bernoulli_logits_logpdf_np, kernels.bernoulli_logits_logpdf_nb,
                  (x, logits)))
    cases.append(("bernoulli_grad",
                  kernels.bernoulli_logits_grad_np, kernels.bernoulli_logits_grad_nb,
                  (x, logits, gb)))

    X = rng.normal(size=(2000, 320))
    cent = rng.normal(size=(10, 320))
    cases.append(("kmeans_assign (2000x10x320)",
                  kernels.kmeans_assign_np, kernels.kmeans_assign_nb, (X, cent)))

    print(f"selected backend: {backend_name()}  (numba available: {USE_NUMBA})")
    print(f"{'kernel':<38} {'numpy':>10} {'numba':>10} {'speedup':>8}")
    for name, np_fn, nb_fn, fn_args in cases:
        t_np = timeit(np_fn, *fn_args, repeats=args.repeats)
        if nb_fn is None:
            print(f"{name:<38} {t_np * 1e3:>8.2f}ms {'n/a':>10} {'':>8}")
            continue
        t_nb = timeit(nb_fn, *fn_args, repeats=args.repeats)
        print(f"{name:<38} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms {t_np / t_nb:>7.1f}x")

    # adam mutates in place; bench it on fresh copies outside the table helper
    p = rng.normal(size=(784, 300))
    grad = rng.normal(size=(784, 300))
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    t_np = timeit(lambda: kernels.adam_update_np(p.copy(), grad, m.copy(), v.copy(),
                                                 3, 1e-3, 0.9, 0.999, 1e-8),
                  repeats=args.repeats)
    if kernels.adam_update_nb is not None:
        t_nb = timeit(lambda: kernels.adam_update_nb(p.copy(), grad, m.copy(), v.copy(),
                                                     3, 1e-3, 0.9, 0.999, 1e-8),
                      repeats=args.repeats)
        print(f"{'adam_update (784x300)':<38} {t_np * 1e3:>8.2f}ms {t_nb * 1e3:>8.2f}ms "
              f"{t_np / t_nb:>7.1f}x")
    else:
        print(f"{'adam_update (784x300)':<38} {t_np * 1e3:>8.2f}ms {'n/a':>10}")


if __name__ == "__main__":
    main()
