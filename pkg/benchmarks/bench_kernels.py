"""Compare the numba and pure-numpy kernel twins.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each case is timed after a warm-up call, so numba compile time is excluded.
Results are also checked for agreement between the two backends.
"""

import argparse
import json
import time

import numpy as np

from fluxdict import _kernels as K


def timeit(fn, *args, repeat=5):
    fn(*args)  # warm-up (and JIT compile)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def cases(rng):
    pre = rng.standard_normal((4096, 4096)).astype(np.float32)
    yield "topk b=4096 d=4096 k=32", K.topk_numpy, K.topk_numba, (pre, 32)
    pre = rng.standard_normal((1024, 512)).astype(np.float32)
    yield "topk b=1024 d=512 k=8", K.topk_numpy, K.topk_numba, (pre, 8)
    atoms = rng.standard_normal((4096, 256)).astype(np.float32)
    idx = rng.integers(0, 4096, size=(4096, 32))
    vals = rng.random((4096, 32)).astype(np.float32)
    bias = np.zeros(256, np.float32)
    yield "sparse decode b=4096 d=4096 n=256 k=32", K.sparse_decode_numpy, K.sparse_decode_numba, (idx, vals, atoms, bias)
    atoms = rng.standard_normal((2048, 64))
    atoms /= np.linalg.norm(atoms, axis=1, keepdims=True)
    x = rng.standard_normal((1000, 64))
    yield "pursuit b=1000 D=2048 n=64 k=8", K.pursuit_numpy, K.pursuit_numba, (x, atoms, 8)
    # training-time shape: one row at a time against a growing dictionary
    x1 = rng.standard_normal((1, 64))
    yield "pursuit b=1 D=2048 n=64 k=8", K.pursuit_numpy, K.pursuit_numba, (x1, atoms, 8)


def agree(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    for u, v in zip(a, b):
        if u is None and v is None:
            continue
        if not np.allclose(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64), atol=1e-4, equal_nan=True):
            return False
    return True


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    results = []
    print(f"{'case':42s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}  agree")
    for name, f_np, f_nb, fargs in cases(rng):
        t_np = timeit(f_np, *fargs, repeat=args.repeat)
        t_nb = timeit(f_nb, *fargs, repeat=args.repeat)
        ok = agree(f_np(*fargs), f_nb(*fargs))
        results.append({"case": name, "numpy_s": t_np, "numba_s": t_nb, "speedup": t_np / t_nb, "agree": ok})
        print(f"{name:42s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:8.2f}  {ok}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
