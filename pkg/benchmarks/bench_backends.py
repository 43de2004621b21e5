"""Time the aggregator kernels under both backends.

The compiled (numba) and plain-numpy paths share one source; this script
runs the forward pass and the training step at several bag sizes under
each, in separate worker processes so the import-time backend choice is
clean, and prints the medians side by side.

Usage: python3 benchmarks/bench_backends.py [--repeats N] [--sizes 16,64,256]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np


def run_worker(sizes, repeats):
    from meltriage.aggregator import (
        AggregatorConfig,
        forward,
        init_params,
        loss_and_grad,
    )
    from meltriage.backend import selected_backend

    config = AggregatorConfig()
    params = init_params(config, 0)
    rng = np.random.default_rng(0)
    rows = []
    for n_tiles in sizes:
        feats = rng.standard_normal((n_tiles, config.feature_dim)).astype(
            np.float32
        )
        for op, call in (
            ("forward", lambda: forward(params, config, feats)),
            ("train_step", lambda: loss_and_grad(
                params, config, feats, 1, rng=np.random.default_rng(1))),
        ):
            for _ in range(3):  # compile + cache warmup
                call()
            timings = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                call()
                timings.append(time.perf_counter() - t0)
            rows.append((op, n_tiles, float(np.median(timings)) * 1e3))
    for op, n_tiles, ms in rows:
        print(f"{selected_backend()},{op},{n_tiles},{ms:.4f}")


def run_comparison(sizes, repeats):
    results = {}
    for backend in ("numba", "numpy"):
        env = dict(os.environ, MELTRIAGE_BACKEND=backend)
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__), "--worker",
             "--sizes", ",".join(str(s) for s in sizes),
             "--repeats", str(repeats)],
            env=env, capture_output=True, text=True,
        )
        if proc.returncode != 0:
            sys.stderr.write(proc.stderr)
            raise SystemExit(f"{backend} worker failed")
        for line in proc.stdout.splitlines():
            name, op, n, ms = line.split(",")
            results[(name, op, int(n))] = float(ms)

    print(f"{'op':<12}{'tiles':>6}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for op in ("forward", "train_step"):
        for n in sizes:
            a = results[("numba", op, n)]
            b = results[("numpy", op, n)]
            print(f"{op:<12}{n:>6}{a:>12.3f}{b:>12.3f}{b / a:>9.1f}x")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=30)
    parser.add_argument("--sizes", default="16,64,256")
    parser.add_argument("--worker", action="store_true",
                        help=argparse.SUPPRESS)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]
    if args.worker:
        run_worker(sizes, args.repeats)
    else:
        run_comparison(sizes, args.repeats)


if __name__ == "__main__":
    main()
