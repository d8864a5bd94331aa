"""Compare the numba kernels with the pure-numpy fallback.

Each backend runs in its own interpreter because the choice is fixed at
import time (CARROLLIAN_NUMBA=0 selects numpy). Timings exclude the first
call, which carries numba compilation; that cost is reported separately.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--json out.json]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

CASES = ("batch_values", "jets", "leaf_census", "geodesic")


def _best(fn, repeat):
    times = []
    result = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn()
        times.append(time.perf_counter() - t0)
    return min(times), result


def run_worker(repeat):
    from carrollian import backend_name
    from carrollian.distribution import leaf_census
    from carrollian.dynamics import integrate_apath
    from carrollian.presets import random_model, rotation, vector_field_line

    model = random_model(4, 3, seed=1)
    prog = model.program
    X = model.chart.halton(20_000, 0)
    pts = X[:500]
    rot = rotation()
    line = vector_field_line()

    cases = {
        "batch_values": lambda: prog.values_batch(X),
        "jets": lambda: np.array([prog.jets(x, 2)[2] for x in pts]),
        "leaf_census": lambda: leaf_census(rot, (21, 21)).counts,
        "geodesic": lambda: integrate_apath(line, None, (0.0, 1.0), [1.0], t_end=2.0).gamma[-1],
    }
    out = {"backend": backend_name(), "cases": {}}
    for name in CASES:
        t0 = time.perf_counter()
        first = cases[name]()
        warm = time.perf_counter() - t0
        best, result = _best(cases[name], repeat)
        if isinstance(result, dict):
            digest = result
        else:
            digest = float(np.sum(np.abs(np.asarray(result, dtype=float))))
        out["cases"][name] = {"first_call_s": warm, "best_s": best, "digest": digest}
        del first
    return out


def _spawn(flag, repeat):
    env = dict(os.environ, CARROLLIAN_NUMBA=flag)
    cmd = [sys.executable, __file__, "--worker", "--repeat", str(repeat)]
    proc = subprocess.run(cmd, env=env, capture_output=True, text=True, check=True)
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--json", help="write raw results here")
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.worker:
        print(json.dumps(run_worker(args.repeat)))
        return 0

    fast = _spawn("1", args.repeat)
    slow = _spawn("0", args.repeat)
    print(f"{'case':<14}{'numba s':>12}{'numpy s':>12}{'speedup':>10}{'compile s':>12}  agree")
    for name in CASES:
        a, b = fast["cases"][name], slow["cases"][name]
        if isinstance(a["digest"], dict):
            agree = a["digest"] == b["digest"]
        else:
            agree = bool(np.isclose(a["digest"], b["digest"], rtol=1e-10, atol=1e-12))
        speed = b["best_s"] / a["best_s"] if a["best_s"] > 0 else float("inf")
        compile_s = max(a["first_call_s"] - a["best_s"], 0.0)
        print(f"{name:<14}{a['best_s']:>12.4f}{b['best_s']:>12.4f}{speed:>9.1f}x{compile_s:>12.2f}  {agree}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump({"numba": fast, "numpy": slow}, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
