#!/usr/bin/env python3
"""Benchmark the numba-compiled kernels against their pure-numpy fallbacks.

Usage:
    python benchmarks/bench_kernels.py [--rows 4096] [--cols 10] [--iters 200]

The numba path is what PRIOR_ATTN_BACKEND=numba (the default) selects at
import time; PRIOR_ATTN_BACKEND=numpy selects the fallbacks measured here.
A full training step is also timed under the currently selected backend.
"""

import argparse
import time

import numpy as np

from prior_attn import kernels


def time_fn(fn, args, iters, warmup=3):
    for _ in range(warmup):
        fn(*args)
    times = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def compare(name, fn_numpy, fn_numba, args, iters):
    t_np = time_fn(fn_numpy, args, iters)
    t_nb = time_fn(fn_numba, args, iters)
    speed = t_np / t_nb if t_nb > 0 else float("inf")
    print(f"{name:<24} numpy {t_np * 1e6:9.1f} us   numba {t_nb * 1e6:9.1f} us   x{speed:.2f}")
    return speed


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rows", type=int, default=4096, help="attention rows (B*h*T)")
    ap.add_argument("--cols", type=int, default=10, help="row length (context length)")
    ap.add_argument("--iters", type=int, default=200)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    z = rng.normal(size=(args.rows, args.cols))
    z_masked = z.copy()
    z_masked[:, -2:] = -np.inf  # typical causal masking pattern
    g = rng.normal(size=z.shape)
    w = kernels.softmax_rows_numpy(z_masked)
    x = rng.normal(size=args.rows * args.cols)

    print(f"active backend: {kernels.BACKEND}")
    print(f"rows={args.rows} cols={args.cols} iters={args.iters}\n")

    compare(
        "softmax_rows",
        kernels.softmax_rows_numpy,
        kernels.softmax_rows_numba,
        (z_masked,),
        args.iters,
    )
    compare(
        "softmax_rows_grad",
        kernels.softmax_rows_grad_numpy,
        kernels.softmax_rows_grad_numba,
        (w, g),
        args.iters,
    )
    compare(
        "log_softmax_rows",
        kernels.log_softmax_rows_numpy,
        kernels.log_softmax_rows_numba,
        (z,),
        args.iters,
    )
    compare(
        "log_softmax_rows_grad",
        kernels.log_softmax_rows_grad_numpy,
        kernels.log_softmax_rows_grad_numba,
        (kernels.log_softmax_rows_numpy(z), g),
        args.iters,
    )
    cdf = kernels.gelu_forward_numpy(x)[1]
    compare(
        "gelu_forward", kernels.gelu_forward_numpy, kernels.gelu_forward_numba, (x,), args.iters
    )
    compare(
        "gelu_backward",
        kernels.gelu_backward_numpy,
        kernels.gelu_backward_numba,
        (x, cdf, rng.normal(size=x.shape)),
        args.iters,
    )

    # agreement check between the two implementations
    np.testing.assert_allclose(
        kernels.softmax_rows_numpy(z_masked), kernels.softmax_rows_numba(z_masked), atol=1e-14
    )
    np.testing.assert_allclose(
        kernels.gelu_forward_numpy(x)[0], kernels.gelu_forward_numba(x)[0], atol=1e-14
    )
    print("\nnumpy/numba agreement within 1e-14")

    # end-to-end: one training step at the desk-scale config
    from prior_attn import ModelConfig, TaskSpec, train_run

    t0 = time.perf_counter()
    train_run(
        ModelConfig(),
        TaskSpec(),
        steps=20,
        seed=0,
        eval_every=0,
        train_episodes=256,
        eval_episodes=32,
    )
    dt = time.perf_counter() - t0
    print(f"\n20 training steps (desk config, backend={kernels.BACKEND}): {dt:.2f} s")


if __name__ == "__main__":
    main()
