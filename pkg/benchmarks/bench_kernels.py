"""Compare the compiled and pure-numpy kernels on representative workloads.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Each kernel runs on identical inputs through both paths; the table reports
median wall time per call and the max absolute difference between outputs.
"""

import argparse
import json
import statistics
import time

import numpy as np

from smtnav import _kernels
from smtnav.env import generate_floorplan


def timed(fn, args, repeat):
    fn(*args)  # warm-up (triggers compilation)
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts), out


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    if isinstance(a, (bool, np.bool_)):
        return float(a != b)
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def workloads(rng):
    d, h, nseg, n = 64, 4, 64, 100
    k_off = np.arange(nseg + 1, dtype=np.int64) * n
    q_off = np.arange(nseg + 1, dtype=np.int64)
    U = rng.normal(size=(nseg, d))
    K = rng.normal(size=(nseg * n, d))
    V = rng.normal(size=(nseg * n, d))
    dO = rng.normal(size=(nseg, d))
    X = rng.normal(size=(500, d))
    plan = generate_floorplan(3)
    w, hgt = plan.extent
    angles = np.linspace(-np.pi / 4, np.pi / 4, 30)
    return {
        "seg_att_fwd": (U, K, V, q_off, k_off, h),
        "seg_att_bwd": (U, K, V, q_off, k_off, h, dO),
        "seg_max": (K, k_off),
        "fps": (X, 100, 499),
        "raycast": (plan.grid, w / 2, hgt / 2, angles, plan.cell_size, 5.0),
        "segment_blocked": (plan.grid, 1.0, 1.0, w - 1.0, hgt - 1.0, plan.cell_size),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()
    compiled = _kernels.numba_kernels()
    if not compiled:
        print("numba unavailable (or disabled with SMTNAV_NUMBA=0); timing numpy only")
    results = []
    for name, call_args in workloads(np.random.default_rng(0)).items():
        t_np, out_np = timed(_kernels.NUMPY_KERNELS[name], call_args, args.repeat)
        row = {"kernel": name, "numpy_ms": 1e3 * t_np}
        if compiled:
            t_nb, out_nb = timed(compiled[name], call_args, args.repeat)
            row.update(numba_ms=1e3 * t_nb, speedup=t_np / t_nb, max_diff=max_diff(out_np, out_nb))
        results.append(row)
    print(f"{'kernel':<16}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}{'max diff':>11}")
    for r in results:
        if "numba_ms" in r:
            print(f"{r['kernel']:<16}{r['numpy_ms']:>10.3f}{r['numba_ms']:>10.3f}"
                  f"{r['speedup']:>9.1f}{r['max_diff']:>11.1e}")
        else:
            print(f"{r['kernel']:<16}{r['numpy_ms']:>10.3f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
