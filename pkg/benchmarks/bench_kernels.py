"""Compare the numba kernels with their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--solve]

Kernel timings use both implementations in-process (numba compile time is
excluded by a warm-up call). ``--solve`` additionally times one end-to-end
Hadamard solve per backend in a subprocess, toggling
``BLINDDEMIX_DISABLE_NUMBA``.
"""

import argparse
import json
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from blinddemix import _kernels as k


def best_of(fn, repeat, number):
    fn()  # warm-up / JIT
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_cases(rng):
    cases = []
    for s, L in ((2, 256), (4, 4096), (8, 65536)):
        a = rng.standard_normal((s, L)) + 1j * rng.standard_normal((s, L))
        cases.append((f"fwht s={s} L={L}", lambda a=a: k.fwht_numba(a),
                      lambda a=a: k.fwht_numpy(a)))
        r = 0.5
        w = a[0].copy()
        cases.append((f"radial_clip L={L}", lambda w=w: k.radial_clip_numba(w, r),
                      lambda w=w: k.radial_clip_numpy(w, r)))
        t = np.full(s, 1.5)
        cases.append((f"spectral_penalty s={s} L={L}",
                      lambda a=a, t=t: k.spectral_penalty_numba(a, t),
                      lambda a=a, t=t: k.spectral_penalty_numpy(a, t)))
    return cases


def solve_time(disable):
    env = dict(os.environ)
    env.pop("BLINDDEMIX_DISABLE_NUMBA", None)
    if disable:
        env["BLINDDEMIX_DISABLE_NUMBA"] = "1"
    cmd = [sys.executable, "-m", "blinddemix.cli", "solve", "--L", "1024", "--K", "64",
           "--N", "64", "--s", "4", "--ensemble", "hadamard", "--out", os.devnull]
    subprocess.run(cmd, env=env, check=True, capture_output=True)  # populate numba cache
    t0 = time.perf_counter()
    out = subprocess.run(cmd, env=env, check=True, capture_output=True, text=True)
    return time.perf_counter() - t0, json.loads(out.stdout)["iterations"]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--number", type=int, default=10)
    p.add_argument("--solve", action="store_true", help="also time an end-to-end solve")
    args = p.parse_args(argv)

    rng = np.random.default_rng(0)
    print(f"{'kernel':<34}{'numba [us]':>12}{'numpy [us]':>12}{'speedup':>9}")
    for name, fast, slow in kernel_cases(rng):
        tf = best_of(fast, args.repeat, args.number) * 1e6
        ts = best_of(slow, args.repeat, args.number) * 1e6
        print(f"{name:<34}{tf:>12.1f}{ts:>12.1f}{ts / tf:>8.2f}x")

    if args.solve:
        for disable in (False, True):
            secs, iters = solve_time(disable)
            label = "numpy" if disable else "numba"
            print(f"solve L=1024 K=N=64 s=4 hadamard [{label}]: {secs:.2f} s, {iters} iterations")


if __name__ == "__main__":
    main()
