"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 256]

Both backends run on identical inputs. The script checks that their
outputs agree before printing timings.
"""
import argparse
import sys
import timeit

import numpy as np

from uae import _kernels


def _spd_batch(rng, batch, n):
    L = np.tril(rng.normal(size=(batch, n, n)))
    idx = np.arange(n)
    L[:, idx, idx] = np.abs(L[:, idx, idx]) + 0.5
    return L @ np.swapaxes(L, 1, 2)


def cases(batch, rng):
    spd4 = _spd_batch(rng, batch, 4)
    spd16 = _spd_batch(rng, batch, 16)
    points, means = rng.normal(size=(4096, 4)), rng.normal(size=(8, 4))
    chols = np.linalg.cholesky(_spd_batch(rng, 8, 4))
    return {
        "cholesky_batched n=4": lambda: _kernels.cholesky_batched(spd4, 1e-12),
        "cholesky_batched n=16": lambda: _kernels.cholesky_batched(spd16, 1e-12),
        "power_iteration n=16": lambda: _kernels.power_iteration(spd16, np.ones(16) / 4.0, 1e-10, 500),
        "gmm_log_prob N=4096 K=8": lambda: _kernels.gmm_log_prob(points, means, chols),
    }


def _time(fn, repeat):
    fn()  # warm-up, includes numba compilation on first use
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def _agree(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, rtol=1e-9, atol=1e-12) for x, y in zip(a, b))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--batch", type=int, default=256)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    table = cases(args.batch, np.random.default_rng(args.seed))

    prev = _kernels.use_numba()
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    try:
        for name, fn in table.items():
            _kernels.use_numba(False)
            slow_out, slow = fn(), _time(fn, args.repeat)
            _kernels.use_numba(True)
            fast_out, fast = fn(), _time(fn, args.repeat)
            flag = "" if _agree(slow_out, fast_out) else "  MISMATCH"
            print(f"{name:<26}{slow * 1e3:>10.3f}{fast * 1e3:>10.3f}{slow / fast:>8.1f}x{flag}")
    finally:
        _kernels.use_numba(prev)
    return 0


if __name__ == "__main__":
    sys.exit(main())
