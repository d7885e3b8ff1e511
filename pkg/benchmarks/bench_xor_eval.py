"""Time XOR evaluation: compiled kernel vs the numpy fallback.

    python benchmarks/bench_xor_eval.py --n 4096 --atoms 5 --bundles 512 --m 10 50 150
"""
import argparse
import time

import numpy as np

from bundleflow import _xorfallback as fallback
from bundleflow import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def case(m, n, atoms, bundles, repeat, rng):
    a = kernels.pack_bits((rng.random((n, atoms, m)) < 0.3).astype(np.uint8))
    p = rng.uniform(0, 100, (n, atoms))
    b = kernels.pack_bits((rng.random((bundles, m)) < 0.6).astype(np.uint8))
    paired = kernels.pack_bits((rng.random((n, 8, m)) < 0.6).astype(np.uint8))
    rows = []
    impls = [("numpy", fallback)]
    if kernels.compiled is not None:
        impls.insert(0, ("cython", kernels.compiled))
    ref = fallback.evaluate_shared(a, p, b)
    for name, impl in impls:
        if not np.array_equal(impl.evaluate_shared(a, p, b), ref):
            raise SystemExit(f"{name} disagrees with the fallback at m={m}")
        shared = best_of(lambda: impl.evaluate_shared(a, p, b), repeat)
        pair = best_of(lambda: impl.evaluate_paired(a, p, paired), repeat)
        rows.append((name, shared, pair))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, nargs="+", default=[10, 50, 150])
    ap.add_argument("--n", type=int, default=4096, help="valuations")
    ap.add_argument("--atoms", type=int, default=5)
    ap.add_argument("--bundles", type=int, default=512, help="shared bundles")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    print(f"backend selected at import: {kernels.BACKEND}")
    print(f"{'m':>5} {'impl':>7} {'shared ms':>10} {'paired ms':>10} {'speedup':>8}")
    for m in args.m:
        rows = case(m, args.n, args.atoms, args.bundles, args.repeat, rng)
        base = dict((r[0], r[1]) for r in rows)["numpy"]
        for name, shared, pair in rows:
            print(f"{m:>5} {name:>7} {shared * 1e3:>10.2f} {pair * 1e3:>10.2f} "
                  f"{base / shared:>7.1f}x")


if __name__ == "__main__":
    main()
