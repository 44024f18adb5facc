"""Compare the compiled and pure-Python PatchMatch kernels.

Run ``python benchmarks/bench_kernels.py [--size 64] [--channels 7]``.
Both backends see identical inputs and seeds, so their fields must agree.
"""
import argparse
import time

import numpy as np

from v2v import kernels
from v2v.propagate import patch_match_features


def bench(backend, src, tgt, image, args):
    start = time.perf_counter()
    nnf = patch_match_features(src, tgt, args.patch, args.iterations, seed=0, backend=backend)
    mid = time.perf_counter()
    backend.vote(image, nnf.offsets, args.patch // 2)
    end = time.perf_counter()
    return nnf, mid - start, end - mid


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--channels", type=int, default=7)
    parser.add_argument("--patch", type=int, default=5)
    parser.add_argument("--iterations", type=int, default=6)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    src = rng.random((args.size, args.size, args.channels))
    tgt = np.roll(src, (2, 3), axis=(0, 1)) + rng.normal(0, 0.05, src.shape)
    image = rng.random((args.size, args.size, 3))

    results = {}
    for name in kernels.available():
        nnf, t_pm, t_vote = bench(kernels.load(name), src, tgt, image, args)
        results[name] = nnf
        print(f"{name:>7}: patchmatch {t_pm:8.3f}s  vote {t_vote:8.3f}s  energy {nnf.energy:.4f}")
    if len(results) == 2:
        same = np.array_equal(results["cython"].offsets, results["python"].offsets)
        print(f"identical fields: {same}")


if __name__ == "__main__":
    main()
