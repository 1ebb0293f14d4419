"""Time the numba and numpy variants of every metric kernel.

    python benchmarks/bench_kernels.py --height 480 --width 640 --repeat 5

Numba variants are called once before timing so compilation (or cache
loading) is excluded. Prints one row per kernel; ``--json`` also dumps
the raw timings.
"""
import argparse
import json
import time

import numpy as np

from comofusion import _kernels as k
from comofusion.metrics import QABF_KA, QABF_KG, QABF_NORM_A, QABF_NORM_G, QABF_SA, QABF_SG, gaussian_taps


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - start)
    return min(times)


def cases(h, w, seed):
    rng = np.random.default_rng(seed)
    a, b, f = (rng.random((h, w)) * 255 for _ in range(3))
    grads = [*k.sobel_numpy(a), *k.sobel_numpy(b), *k.sobel_numpy(f)]
    qargs = (*grads, QABF_KG, QABF_SG, QABF_KA, QABF_SA, QABF_NORM_G, QABF_NORM_A)
    return {
        "sobel": (a,),
        "histogram256": (np.rint(a).astype(np.int64),),
        "sf_terms": (a,),
        "average_gradient": (a,),
        "qabf_sums": qargs,
        "filter_valid": (a, gaussian_taps()),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="write timings here")
    args = p.parse_args(argv)
    if not k.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rows = []
    for name, fargs in cases(args.height, args.width, args.seed).items():
        jit_fn, np_fn = getattr(k, name + "_numba"), getattr(k, name + "_numpy")
        jit_fn(*fargs)
        t_jit = best_of(jit_fn, fargs, args.repeat)
        t_np = best_of(np_fn, fargs, args.repeat)
        rows.append({"kernel": name, "numba_ms": 1e3 * t_jit, "numpy_ms": 1e3 * t_np, "speedup": t_np / t_jit})

    print(f"{args.height}x{args.width}, best of {args.repeat}")
    print(f"{'kernel':<18}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for r in rows:
        print(f"{r['kernel']:<18}{r['numba_ms']:>10.2f}{r['numpy_ms']:>10.2f}{r['speedup']:>8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"shape": [args.height, args.width], "repeat": args.repeat, "rows": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
