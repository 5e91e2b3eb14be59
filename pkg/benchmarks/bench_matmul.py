"""Time the compiled kernels against the numpy fallback on the shapes the toy models use.

    python benchmarks/bench_matmul.py [--repeat 5] [--json out.json]

Both backends accumulate in the same order, so every row also checks that the
outputs are bit-identical.
"""
import argparse
import json
import statistics
import sys
import time

import numpy as np

from moe_upcycle import _backend, _fallback

SHAPES = [(256, 16, 64), (256, 64, 16), (1024, 16, 32), (512, 64, 256), (64, 256, 64)]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times), statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args(argv)
    if not _backend.native_available():
        print("compiled kernels are not built; reinstall without MOE_UPCYCLE_NO_EXT", file=sys.stderr)
        return 1
    from moe_upcycle import _kernels

    rng = np.random.default_rng(0)
    rows = []
    print(f"{'m x k x n':>16} {'native ms':>10} {'python ms':>10} {'numpy @ ms':>10} {'speedup':>8}  identical")
    for m, k, n in SHAPES:
        a = rng.standard_normal((m, k)).astype(args.dtype)
        b = rng.standard_normal((k, n)).astype(args.dtype)
        nat, _ = best_of(lambda: _kernels.matmul(a, b), args.repeat)
        py, _ = best_of(lambda: _fallback.matmul(a, b), args.repeat)
        blas, _ = best_of(lambda: a @ b, args.repeat)
        same = bool(np.array_equal(_kernels.matmul(a, b), _fallback.matmul(a, b)))
        rows.append({"shape": [m, k, n], "native_s": nat, "python_s": py, "blas_s": blas, "identical": same})
        print(f"{f'{m}x{k}x{n}':>16} {nat * 1e3:10.3f} {py * 1e3:10.3f} {blas * 1e3:10.3f} {py / nat:8.1f}  {same}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"dtype": args.dtype, "rows": rows}, f, indent=2)
    return 0 if all(r["identical"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
