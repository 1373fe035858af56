"""Time the numba and pure-Python kernel paths side by side.

Each path runs in its own interpreter because the backend is fixed at import
time by FLOWSERVE_DISABLE_NUMBA.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import json
import os
import subprocess
import sys

WORKER = r"""
import json, random, sys, time
import numpy as np
from flowserve import _kernels

repeat = int(sys.argv[1])
rng = random.Random(0)
nets = []
for _ in range(200):
    n = rng.randint(6, 12)
    cap = np.zeros((n, n), dtype=np.int64)
    for a in range(n):
        for b in range(n):
            if a != b and rng.random() < 0.4:
                cap[a, b] = rng.randint(1, 100)
    nets.append(cap)
pts = np.random.default_rng(0).uniform(0, 4000, (20000, 2))
cents = pts[:8].copy()
A_int = np.array([[1, 0, 1, 0], [0, 1, 0, 1], [8, 5, 0, 0], [0, 0, 5, 2]])
A = A_int / np.array([[37.0], [29.0], [40.0], [20.0]])

def maxflow():
    for cap in nets:
        _kernels.preflow_push(cap, 0, cap.shape[0] - 1)

def lloyd():
    _kernels.lloyd_step(pts, cents)

def ip():
    _kernels.integer_assignment(A, np.ones(4), A_int, np.array([37, 29, 40, 20]),
                                np.array([5.0, 8.0, 4.0, 10.0]), np.zeros(4), 1000)

out = {}
for name, fn in (("preflow_push x200", maxflow), ("lloyd_step 20k pts", lloyd), ("integer_assignment", ip)):
    fn()  # warm-up, includes JIT compilation on the numba path
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    out[name] = best
print(json.dumps(out))
"""


def run(disable: bool, repeat: int) -> dict:
    env = dict(os.environ, FLOWSERVE_DISABLE_NUMBA="1" if disable else "0")
    res = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return json.loads(res.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    compiled, pure = run(False, args.repeat), run(True, args.repeat)
    print(f"{'kernel':24s} {'numba ms':>10s} {'pure ms':>10s} {'speedup':>8s}")
    for name in compiled:
        c, p = compiled[name] * 1e3, pure[name] * 1e3
        print(f"{name:24s} {c:10.3f} {p:10.3f} {p / c:8.1f}x")


if __name__ == "__main__":
    main()
