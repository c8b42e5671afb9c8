"""Timing comparison of the compiled divergence kernels vs the numpy path.

Runs softmax, KL, and Jensen-Shannon over a sweep of vocabulary sizes
and prints per-call microseconds for whichever backends import cleanly.

Usage:
    python3 benchmarks/bench_kernels.py --repeats 2000
"""

import argparse
import time

import numpy as np

from quadcd import _kernels_py

try:
    from quadcd import _speedups
except ImportError:
    _speedups = None


def make_inputs(rng, size):
    logits = rng.normal(scale=3.0, size=size)
    p = _kernels_py.softmax(logits)
    q = _kernels_py.softmax(rng.normal(scale=3.0, size=size))
    return logits, p, q


def time_call(fn, args, repeats):
    # one warmup, then best-of-three timing blocks
    fn(*args)
    best = float("inf")
    for _ in range(3):
        start = time.perf_counter()
        for _ in range(repeats):
            fn(*args)
        best = min(best, (time.perf_counter() - start) / repeats)
    return best * 1e6


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=1000, help="calls per timing block")
    parser.add_argument(
        "--sizes", type=int, nargs="+", default=[64, 512, 4096, 32768],
        help="vocabulary sizes to sweep",
    )
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    backends = [("numpy", _kernels_py)]
    if _speedups is not None:
        backends.append(("cython", _speedups))
    else:
        print("note: compiled extension not importable; timing numpy only")

    rng = np.random.default_rng(args.seed)
    ops = ("softmax", "kl_div", "js_div")

    header = f"{'op':<14}{'vocab':>8}" + "".join(f"{name + ' us':>12}" for name, _ in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))

    for size in args.sizes:
        logits, p, q = make_inputs(rng, size)
        for op in ops:
            call_args = (logits,) if op == "softmax" else (p, q)
            row = f"{op:<14}{size:>8}"
            timings = []
            for _, mod in backends:
                micros = time_call(getattr(mod, op), call_args, args.repeats)
                timings.append(micros)
                row += f"{micros:>12.2f}"
            if len(timings) == 2:
                row += f"{timings[0] / timings[1]:>9.2f}x"
            print(row)


if __name__ == "__main__":
    main()
