"""Compare the numba kernels with the pure-numpy fallback.

The backend is fixed at import time, so each one runs in its own
subprocess (``FEDFF_DISABLE_JIT=1`` selects numpy).  Each subprocess also
prints a checksum of its results so the two backends can be compared.

    python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import json
import os
import subprocess
import sys
import time

WORKER = r"""
import json, sys, time
import numpy as np
from fedff import backend_name
from fedff.control import AnalyticFeedforward, ControlGains, mean_tracking_error, run_lap
from fedff.neuralff import TrainConfig, fit, init_model
from fedff.trajgen import count_crossings, generate_path, load_path_specs
from fedff.vehicle import VehicleParams

repeat = int(sys.argv[1])
P, G = VehicleParams(), ControlGains()
spec = load_path_specs()["IX"]
traj = generate_path(spec)
ff = AnalyticFeedforward(P)
rows = run_lap(traj, ff, G, P).training_rows()
theta = np.linspace(0, 2 * np.pi, 2049)
xs, ys = np.cos(theta) * (1 + 0.2 * np.cos(3 * theta)), np.sin(theta)


def timed(fn):
    fn()  # warm-up (includes compilation for numba)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


res = {"backend": backend_name()}
t, log = timed(lambda: run_lap(traj, ff, G, P))
res["lap"] = (t, mean_tracking_error(log))
t, out = timed(lambda: fit(init_model(10, 0), rows, TrainConfig(epochs=2)))
res["train_2_epochs"] = (t, out.final_loss)
t, out = timed(lambda: generate_path(spec))
res["generate_path"] = (t, out.duration)
t, out = timed(lambda: count_crossings(xs, ys))
res["count_crossings"] = (t, out)
print(json.dumps(res))
"""


def run(disable_jit: bool, repeat: int) -> dict:
    env = dict(os.environ, FEDFF_DISABLE_JIT="1" if disable_jit else "0")
    out = subprocess.run([sys.executable, "-c", WORKER, str(repeat)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    t0 = time.perf_counter()
    fast = run(False, args.repeat)
    slow = run(True, args.repeat)
    print(f"{'kernel':<18}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>9}  result (numba / numpy)")
    for key in fast:
        if key == "backend":
            continue
        (tf, rf), (ts, rs) = fast[key], slow[key]
        print(f"{key:<18}{1e3 * tf:>12.2f}{1e3 * ts:>12.2f}{ts / tf:>8.1f}x  {rf:.10g} / {rs:.10g}")
    print(f"backends: {fast['backend']} vs {slow['backend']}; total {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
