"""Time each hot kernel on its numba and numpy paths.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Numba functions are warmed up (compiled) before timing.
"""

import argparse
import timeit

import numpy as np

from pate_tgan import _kernels as K


def cases(rng):
    a, d = rng.normal(size=(128, 64)), rng.normal(size=(128, 64))
    g = rng.normal(size=(128, 4000))
    scores = rng.uniform(size=(100, 128))
    counts = rng.integers(0, 100, size=(4096, 2))
    n1, n2 = rng.normal(0, 40, size=(4096, 2)), rng.normal(0, 40, size=(4096, 2))
    return {
        "outer_rows (128x64x64)": ("outer_rows", (a, d)),
        "clip_rows (128x4000)": ("clip_rows", (g, 1.0)),
        "clipped_sum (128x4000)": ("clipped_sum", (g, 1.0)),
        "count_votes (100x128)": ("count_votes", (scores,)),
        "confident_decisions (4096)": ("confident_decisions", (counts, n1, n2, 70.0)),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not K._numba_installed:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for label, (name, call_args) in cases(rng).items():
        f_np, f_nb = getattr(K, name + "_np"), getattr(K, name + "_nb")
        f_nb(*call_args)
        t_np = min(timeit.repeat(lambda: f_np(*call_args), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*call_args), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:<30}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
