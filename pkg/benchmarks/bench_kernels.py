"""Benchmark the compiled kernels against the NumPy reference.

Usage: python benchmarks/bench_kernels.py [--repeats 5]

Covers the three hot paths (batched margins, per-dataset losses, fused
loss+gradient) at training-shaped and evaluation-shaped workloads, plus one
end-to-end training run per backend via ROBICL_NO_EXT.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from robicl.kernels import _reference

try:
    from robicl.kernels import _speed
except ImportError:
    _speed = None


WORKLOADS = [
    ("train step, d=20  (B=2000, N=200)", 2000, 200, 20),
    ("train step, d=100 (B=1000, N=1000)", 1000, 1000, 100),
    ("mc oracle,  d=10  (B=10000, N=1000)", 10000, 1000, 10),
    ("eval batch, d=100 (B=100, N=1000, T=200)", 100, 1000, 100),
]


def timeit(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_kernels(repeats):
    rng = np.random.default_rng(0)
    print(f"{'workload':44s} {'kernel':22s} {'numpy':>9s} {'cython':>9s} {'speedup':>8s}")
    for label, b, n, d in WORKLOADS:
        u_demos = np.ascontiguousarray(rng.uniform(0, 0.2, size=(b, n, d)))
        u_query = rng.uniform(0, 0.2, size=(b, d))
        u_queries = rng.uniform(0, 0.2, size=(b, 200, d)) if "eval" in label else None
        bvec = rng.uniform(size=d + 1)
        a = rng.uniform(size=(d + 1, d))
        cases = {
            "attacked_loss_grad": lambda impl: impl.attacked_loss_grad(
                u_demos, u_query, bvec, a, 0.1),
            "attacked_loss": lambda impl: impl.attacked_loss(
                u_demos, u_query, bvec, a, 0.1),
        }
        if u_queries is not None:
            cases = {"batch_margins": lambda impl: impl.batch_margins(
                u_demos, u_queries, bvec, a, 0.1)}
        for name, fn in cases.items():
            t_np = timeit(lambda: fn(_reference), repeats)
            if _speed is None:
                print(f"{label:44s} {name:22s} {t_np:8.3f}s {'n/a':>9s}")
                continue
            t_cy = timeit(lambda: fn(_speed), repeats)
            print(f"{label:44s} {name:22s} {t_np:8.3f}s {t_cy:8.3f}s "
                  f"{t_np / t_cy:7.1f}x")


def bench_training():
    print("\nend-to-end training (d=20, B=1000, N=200, 50 steps):")
    code = ("import time; from robicl.training import TrainConfig, train; "
            "cfg = dict(d=20, lam=0.1, eps=0.0975, n_demos=200, seed=0, "
            "init='reduced-constant:0.02'); "
            "train(TrainConfig(steps=10, datasets_per_step=500, **cfg)); "  # warm-up
            "t0=time.time(); "
            "train(TrainConfig(steps=50, datasets_per_step=1000, **cfg)); "
            "print(f'  {time.time()-t0:.1f}s')")
    for label, env in (("cython", {}), ("numpy ", {"ROBICL_NO_EXT": "1"})):
        print(f"  {label}: ", end="", flush=True)
        subprocess.run([sys.executable, "-c", code],
                       env={**os.environ, **env}, check=True)


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()
    if _speed is None:
        print("compiled extension not available; timing NumPy only")
    bench_kernels(args.repeats)
    bench_training()
