"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Times each kernel at the sizes the pipeline actually uses, checks that both
backends agree, and prints a small table.
"""

import argparse
import timeit

import numpy as np

from pointpst import _kernels_py

try:
    from pointpst import _kernels
except ImportError:  # extension not built
    _kernels = None


def cases(rng):
    cloud = rng.standard_normal((256, 3))
    big = rng.standard_normal((1024, 3))
    equal = rng.standard_normal((32 * 256, 64))
    ragged_len = rng.integers(200, 257, 32)
    ragged_off = np.concatenate([[0], np.cumsum(ragged_len)])
    ragged = rng.standard_normal((ragged_off[-1], 64))
    return [
        ("knn_mean_distance N=256 k=8", "knn_mean_distance", (cloud, 8)),
        ("knn_mean_distance N=1024 k=8", "knn_mean_distance", (big, 8)),
        ("segment_max 32x256x64 equal", "segment_max", (equal, np.arange(33) * 256)),
        ("segment_max 32 ragged x64", "segment_max", (ragged, ragged_off)),
    ]


def best_time(fn, args, repeat):
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn_name, fn_args in cases(rng):
        ref = getattr(_kernels_py, fn_name)
        t_py = best_time(ref, fn_args, args.repeat)
        if _kernels is None:
            print(f"{name:32s} {t_py * 1e3:10.3f} {'n/a':>10s} {'n/a':>8s}")
            continue
        fast = getattr(_kernels, fn_name)
        a, b = ref(*fn_args), fast(*fn_args)
        for x, y in zip(np.atleast_1d(a) if fn_name == "knn_mean_distance" else a,
                        np.atleast_1d(b) if fn_name == "knn_mean_distance" else b):
            assert np.allclose(x, y, rtol=0, atol=1e-12), name
        t_cy = best_time(fast, fn_args, args.repeat)
        print(f"{name:32s} {t_py * 1e3:10.3f} {t_cy * 1e3:10.3f} {t_py / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
