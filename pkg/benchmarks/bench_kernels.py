"""Time each hot kernel against its pure-numpy fallback.

Run with the jitted kernels enabled (the default):

    python3 benchmarks/bench_kernels.py

Pipeline-shaped inputs: a few thousand bank rows of a few hundred
dimensions, feature maps around 28x28. Reported numbers are the best of
--repeats runs after an untimed warmup call per flavor.
"""

import argparse
import time

import numpy as np

from patchbank import kernels


def best_of(fn, repeats):
    times = []
    fn()  # untimed: jit compilation, cache warming
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(scale):
    rng = np.random.default_rng(0)
    n_bank = int(2000 * scale)
    n_query = int(784 * scale)
    dim = 256
    bank = rng.normal(size=(n_bank, dim))
    queries = rng.normal(size=(n_query, dim))
    fmap = rng.normal(size=(512, 28, 28))
    coarse = rng.normal(size=(1024, 14, 14))
    nb = kernels.nn_table_numpy(bank, 5)

    return [
        ("pairwise_sqdist", f"{n_query}x{dim} vs {n_bank}x{dim}",
         lambda f: f(queries, bank)),
        ("greedy_select", f"{n_bank}x{dim}, pick 1%",
         lambda f: f(bank, max(1, n_bank // 100), 0)),
        ("box_mean", "512x28x28, s=3", lambda f: f(fmap, 3)),
        ("bilinear_resize", "1024x14x14 -> 28x28",
         lambda f: f(coarse, 28, 28)),
        ("nn_table", f"{n_bank}x{dim}, b=5", lambda f: f(bank, 5)),
        ("score_patches", f"{n_query} queries, b=5",
         lambda f: f(queries, bank, nb)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--scale", type=float, default=1.0,
                        help="multiplier on bank/query row counts")
    args = parser.parse_args()

    if not kernels.USING_NUMBA:
        print("jitted kernels are disabled (PATCHBANK_NUMBA=0); "
              "rerun without the flag for a comparison")

    print(f"{'kernel':<18} {'input':<28} {'numpy':>10} "
          f"{'numba':>10} {'speedup':>8}")
    for name, desc, call in cases(args.scale):
        t_np = best_of(lambda: call(getattr(kernels, name + "_numpy")),
                       args.repeats)
        row = f"{name:<18} {desc:<28} {t_np * 1e3:>8.2f}ms"
        if kernels.USING_NUMBA:
            t_nb = best_of(lambda: call(getattr(kernels, name + "_numba")),
                           args.repeats)
            row += f" {t_nb * 1e3:>8.2f}ms {t_np / t_nb:>7.1f}x"
        else:
            row += f" {'n/a':>10} {'n/a':>8}"
        print(row)


if __name__ == "__main__":
    main()
