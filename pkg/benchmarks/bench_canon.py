"""Time canonical labeling with the compiled kernel against the Python fallback.

    python3 benchmarks/bench_canon.py [--graphs 2000] [--repeat 3]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from graphsteal import canon
from graphsteal.graphdata import GenConfig, gen_synthetic_dataset


def workload(count: int, seed: int = 0):
    cfg = GenConfig(num_graphs=count, n_max=12, unique=False, max_retries=200)
    ds = gen_synthetic_dataset(cfg, seed)
    return [(g.nodes, g.edges, g.b) for g in ds.graphs]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--graphs", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    items = workload(args.graphs)
    backends = ["python"] + (["cython"] if canon.BACKEND == "cython" else [])
    keys = {}
    best = {}
    for be in backends:
        keys[be] = [canon.canonical_key_arrays(n, e, b, backend=be) for n, e, b in items]
        run = lambda: [canon.canonical_key_arrays(n, e, b, backend=be) for n, e, b in items]  # noqa: E731
        best[be] = min(timeit.repeat(run, number=1, repeat=args.repeat))
        print(f"{be:>7}: {best[be]:.3f} s for {len(items)} graphs ({1e6 * best[be] / len(items):.1f} us/graph)")
    if "cython" in best:
        assert keys["cython"] == keys["python"], "backends disagree"
        print(f"speedup: {best['python'] / best['cython']:.1f}x (identical keys)")
    else:
        print("compiled kernel not available; only the fallback was timed")
    sizes = np.array([len(n) for n, _, _ in items])
    print(f"graph sizes: {sizes.min()}..{sizes.max()} nodes, mean {sizes.mean():.1f}")


if __name__ == "__main__":
    main()
