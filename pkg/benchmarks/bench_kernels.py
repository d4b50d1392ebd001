"""Compare the compiled conv1d kernels against the numpy fallback.

Runs forward, backward-data, and backward-weight on encoder-shaped problems
and prints per-call times plus the speedup. Both backends are imported
directly, so one process measures both regardless of B2V_PURE_PYTHON.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--dtype float32]
"""

import argparse
import time

import numpy as np

from burst2vec._kernels import fallback

try:
    from burst2vec._kernels import _conv1d as native
except ImportError:
    native = None

# (label, batch, c_in, c_out, t_in, kernel, stride): the first four rows are
# the default encoder stack applied to one second of 16 kHz audio
CASES = [
    ("encoder L0", 8, 1, 64, 16000, 10, 5),
    ("encoder L1", 8, 64, 64, 3199, 8, 4),
    ("encoder L2", 8, 64, 64, 798, 4, 2),
    ("encoder L3", 8, 64, 64, 398, 4, 2),
    ("wide", 4, 128, 128, 2000, 8, 4),
]


def run_case(impl, x, w, gy, stride, repeats):
    t_in = x.shape[2]
    kernel = w.shape[2]
    times = {}
    for name, fn, args in [
        ("forward", impl.conv1d_forward, (x, w, stride)),
        ("backward_data", impl.conv1d_backward_data, (gy, w, stride, t_in)),
        ("backward_weight", impl.conv1d_backward_weight, (gy, x, stride, kernel)),
    ]:
        fn(*args)  # warm up
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn(*args)
        times[name] = (time.perf_counter() - t0) / repeats
    return times


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--dtype", default="float32",
                        choices=("float32", "float64"))
    args = parser.parse_args()
    dtype = np.dtype(args.dtype)

    if native is None:
        print("compiled backend not importable; timing the fallback only\n")

    rng = np.random.default_rng(0)
    header = f"{'case':<12} {'op':<16} {'python':>10} {'native':>10} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for label, b, c_in, c_out, t_in, kernel, stride in CASES:
        x = rng.normal(size=(b, c_in, t_in)).astype(dtype)
        w = rng.normal(size=(c_out, c_in, kernel)).astype(dtype)
        t_out = (t_in - kernel) // stride + 1
        gy = rng.normal(size=(b, c_out, t_out)).astype(dtype)

        py = run_case(fallback, x, w, gy, stride, args.repeats)
        nat = run_case(native, x, w, gy, stride, args.repeats) if native else None
        for op in ("forward", "backward_data", "backward_weight"):
            if nat is None:
                print(f"{label:<12} {op:<16} {py[op] * 1e3:>8.2f}ms {'-':>10} {'-':>8}")
            else:
                ratio = py[op] / nat[op]
                print(f"{label:<12} {op:<16} {py[op] * 1e3:>8.2f}ms "
                      f"{nat[op] * 1e3:>8.2f}ms {ratio:>7.2f}x")


if __name__ == "__main__":
    main()
