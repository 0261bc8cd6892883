"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

The first numba call (JIT compile or cache load) is excluded from timing.
"""

import argparse
import time

import numpy as np

from prosody_intent import kernels


def _time(fn, repeat):
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(rng):
    frames = rng.standard_normal((400, 534))
    y_true = rng.integers(0, 3, 200_000)
    y_pred = rng.integers(0, 3, 200_000)
    theta = rng.standard_normal(500_000)
    grad = rng.standard_normal(500_000)

    def adam():
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        kernels.adam_update(theta.copy(), grad, m, v, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                            weight_decay=1e-5, step=3)

    return {
        "acf_peaks (400x534 frames)": lambda: kernels.acf_peaks(frames, 40, 267),
        "confusion_counts (200k)": lambda: kernels.confusion_counts(y_true, y_pred, 3),
        "adam_update (500k params)": adam,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    print(f"{'kernel':<30}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(rng).items():
        times = {}
        for b in backends:
            with kernels.use_backend(b):
                times[b] = _time(fn, args.repeat)
        row = f"{name:<30}" + "".join(f"{1e3 * times[b]:>10.2f}ms" for b in backends)
        if "numba" in times:
            row += f"{times['numpy'] / times['numba']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
