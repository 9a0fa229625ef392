"""Compare the numba and pure-numpy convolution kernels.

Kernel timings run both families in one process (each is importable
regardless of ``EDGESSD_BACKEND``). ``--end-to-end`` additionally times full
training steps of the toy detector in a subprocess per backend, since the
env flag is read once at import.

    python benchmarks/bench_kernels.py --repeat 5 --end-to-end
"""

import argparse
import json
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from edgessd.nn import kernels as K

# (name, op, input shape NCHW, weight shape, stride, pad); shapes follow the toy detector trunk
CASES = [
    ("conv3x3 s2 3->16 @96", "conv", (8, 3, 96, 96), (16, 3, 3, 3), 2, 1),
    ("dw3x3 s1 16 @48", "dw", (8, 16, 48, 48), (16, 3, 3), 1, 1),
    ("pw 16->32 @48", "conv", (8, 16, 48, 48), (32, 16, 1, 1), 1, 0),
    ("dw3x3 s2 64 @24", "dw", (8, 64, 24, 24), (64, 3, 3), 2, 1),
    ("pw 64->128 @12", "conv", (8, 64, 12, 12), (128, 64, 1, 1), 1, 0),
]

_E2E = """
import time, numpy as np
from edgessd.train import TrainConfig, build_splits, _stack, train_step
from edgessd.model import build_model
from edgessd.optim import AdamState
from edgessd._accel import backend_name
cfg = TrainConfig(train_images=24)
sp = build_splits(cfg)
m = build_model(cfg.model_spec(), 0, acknowledge=True)
x, g = _stack(sp.train[:8]), [i.gt_arrays() for i in sp.train[:8]]
adam = AdamState()
train_step(m, adam, x, g, cfg, 1e-4)  # compile / warm caches
ts = []
for _ in range({steps}):
    t0 = time.perf_counter(); train_step(m, adam, x, g, cfg, 1e-4); ts.append(time.perf_counter() - t0)
print(backend_name(), min(ts), sum(ts) / len(ts))
"""


def _time(fn, repeat):
    fn()  # first call compiles under numba
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return min(out), statistics.median(out)


def kernel_table(repeat: int, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    rows = []
    for name, op, xs, ws, stride, pad in CASES:
        x = rng.standard_normal(xs)
        w = rng.standard_normal(ws)
        fwd = K.conv_forward if op == "conv" else K.depthwise_forward
        bwd = K.conv_backward if op == "conv" else K.depthwise_backward
        y = fwd(x, w, stride, pad, backend="numpy")
        gy = rng.standard_normal(y.shape)
        row = {"case": name}
        for backend in ("numba", "numpy"):
            row[f"{backend}_fwd_ms"] = 1e3 * _time(lambda b=backend: fwd(x, w, stride, pad, backend=b), repeat)[0]
            row[f"{backend}_bwd_ms"] = 1e3 * _time(lambda b=backend: bwd(gy, x, w, stride, pad, backend=b), repeat)[0]
        # both families must agree before their timings mean anything
        np.testing.assert_allclose(fwd(x, w, stride, pad, backend="numba"), y, rtol=1e-10, atol=1e-10)
        rows.append(row)
    return rows


def end_to_end(steps: int) -> dict:
    out = {}
    for backend in ("numba", "numpy"):
        env = dict(os.environ, EDGESSD_BACKEND=backend)
        res = subprocess.run([sys.executable, "-c", _E2E.format(steps=steps)], env=env, capture_output=True,
                             text=True, check=True)
        name, best, mean = res.stdout.split()
        out[name] = {"best_s": float(best), "mean_s": float(mean)}
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5, help="timed calls per kernel (default: 5)")
    ap.add_argument("--end-to-end", action="store_true", help="also time toy training steps per backend")
    ap.add_argument("--steps", type=int, default=5, help="training steps for --end-to-end (default: 5)")
    ap.add_argument("--json", help="write results here as JSON")
    args = ap.parse_args(argv)

    rows = kernel_table(args.repeat)
    print(f"{'case':<26}{'numba fwd':>11}{'numpy fwd':>11}{'numba bwd':>11}{'numpy bwd':>11}   (ms, best of {args.repeat})")
    for r in rows:
        print(f"{r['case']:<26}{r['numba_fwd_ms']:>11.2f}{r['numpy_fwd_ms']:>11.2f}"
              f"{r['numba_bwd_ms']:>11.2f}{r['numpy_bwd_ms']:>11.2f}")
    result = {"kernels": rows}
    if args.end_to_end:
        result["train_step"] = end_to_end(args.steps)
        for name, r in result["train_step"].items():
            print(f"train step (batch 8), {name}: best {r['best_s']:.3f} s, mean {r['mean_s']:.3f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=2)


if __name__ == "__main__":
    main()
