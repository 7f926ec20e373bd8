"""
Compare the compiled and NumPy kernel backends.

    python3 benchmarks/bench_kernels.py [--users 1000 --items 2000 --repeat 3]

Times one WARP epoch and one pass of mini-batch WMRB/CE gradients on a
planted synthetic dataset, per backend, and prints the speedup.
"""

import argparse
import time

import numpy as np

from wmrb._kernels import BACKENDS
from wmrb.data import identity_features
from wmrb.model import init_params
from wmrb.synthetic import planted_dataset
from wmrb.trainer import (
    AdagradState,
    TrainConfig,
    _kernel_batch,
    sample_batch,
    train_warp_epoch,
)


def best_of(repeat, fn):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bench_warp(ds, backend, dim, repeat):
    uf, itf = identity_features(ds.num_users), identity_features(ds.num_items)
    cfg = TrainConfig(loss="warp", dim=dim, backend=backend)

    def run():
        params = init_params(dim, ds.num_users, ds.num_items, seed=0)
        train_warp_epoch(ds, params, AdagradState(params), cfg, np.random.default_rng(0),
                         uf, itf)

    return best_of(repeat, run)


def bench_batch(ds, backend, kind, dim, batches, candidates, threads, repeat):
    uf, itf = identity_features(ds.num_users), identity_features(ds.num_items)
    params = init_params(dim, ds.num_users, ds.num_items, seed=0)
    rng = np.random.default_rng(0)
    work = [sample_batch(ds, rng, 64, candidates) for _ in range(batches)]
    kern = BACKENDS[backend]

    def run():
        for b in work:
            _kernel_batch(kern, kind, params, uf, itf, b, threads)

    return best_of(repeat, run)


def main():
    ap = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    ap.add_argument("--users", type=int, default=1000)
    ap.add_argument("--items", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=32)
    ap.add_argument("--batches", type=int, default=50)
    ap.add_argument("--candidates", type=int, default=1000)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    ds = planted_dataset(args.users, args.items, num_clusters=20, seed=0).dataset
    print(f"{ds.num_users} users, {ds.num_items} items, {ds.num_train} interactions, "
          f"dim {args.dim}; best of {args.repeat}")
    names = sorted(BACKENDS)
    if "cython" not in BACKENDS:
        print("compiled backend not built; timing the fallback only")

    rows = [("warp epoch", lambda b: bench_warp(ds, b, args.dim, args.repeat))]
    for label, kind in (("wmrb batches", 0), ("ce batches", 1)):
        rows.append((
            f"{label} x{args.batches}",
            lambda b, kind=kind: bench_batch(ds, b, kind, args.dim, args.batches,
                                             args.candidates, args.threads, args.repeat),
        ))

    print(f"{'kernel':<18}" + "".join(f"{n:>12}" for n in names) + f"{'speedup':>10}")
    for label, fn in rows:
        t = {n: fn(n) for n in names}
        speedup = t["python"] / t["cython"] if "cython" in t else float("nan")
        print(f"{label:<18}" + "".join(f"{t[n]:>11.3f}s" for n in names) + f"{speedup:>9.1f}x")


if __name__ == "__main__":
    main()
