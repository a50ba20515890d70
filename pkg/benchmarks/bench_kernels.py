"""Compare the numba kernels with their numpy fallbacks.

Kernel timings run both flavours in this process.  The end-to-end epoch
timing starts one subprocess per backend so HETDIFF_DISABLE_NUMBA takes
effect at import.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--dim 128]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from hetdiff import _kernels as K

EPOCH_SNIPPET = """
import json, time
from hetdiff import _kernels
from hetdiff.data_io import SyntheticSpec, generate_synthetic
from hetdiff.training import TrainConfig, train
g, _, _ = generate_synthetic(SyntheticSpec())
cfg = TrainConfig(epochs={epochs}, dim={dim}, seed=0)
train(TrainConfig(epochs=1, dim=8, T=4, tau=2, batch_size=64), g)  # warm-up and JIT
t0 = time.perf_counter()
train(cfg, g)
print(json.dumps({{"backend": _kernels.BACKEND, "seconds": time.perf_counter() - t0}}))
"""


def best_of(fn, repeat):
    fn()  # first call compiles
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(dim, rng):
    n_nodes, tau = 3000, 30
    rows = np.repeat(np.arange(n_nodes, dtype=np.int64), tau)
    cols = rng.integers(0, n_nodes, rows.size).astype(np.int64)
    vals = rng.random(rows.size)
    x = rng.normal(size=(n_nodes, dim))
    g = rng.normal(size=(n_nodes, dim))
    offsets = np.arange(0, rows.size + 1, tau, dtype=np.int64)
    scores = rng.normal(size=rows.size)
    y = K.np_segment_softmax(scores, offsets)
    return [
        ("coo_scatter", lambda: K.coo_scatter(rows, cols, vals, x, n_nodes), lambda: K.np_coo_scatter(rows, cols, vals, x, n_nodes)),
        ("coo_entry_dot", lambda: K.coo_entry_dot(rows, cols, g, x), lambda: K.np_coo_entry_dot(rows, cols, g, x)),
        ("segment_softmax", lambda: K.segment_softmax(scores, offsets), lambda: K.np_segment_softmax(scores, offsets)),
        ("segment_softmax_grad", lambda: K.segment_softmax_grad(y, scores, offsets), lambda: K.np_segment_softmax_grad(y, scores, offsets)),
    ]


def epoch_time(disable, epochs, dim):
    env = dict(os.environ)
    env.pop("HETDIFF_DISABLE_NUMBA", None)
    if disable:
        env["HETDIFF_DISABLE_NUMBA"] = "1"
    proc = subprocess.run(
        [sys.executable, "-c", EPOCH_SNIPPET.format(epochs=epochs, dim=dim)], capture_output=True, text=True, env=env, check=True
    )
    return json.loads(proc.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--epochs", type=int, default=2, help="epochs for the end-to-end timing (0 skips it)")
    args = ap.parse_args(argv)

    if K.BACKEND != "numba":
        print("numba backend is not active; kernel comparison needs it (unset HETDIFF_DISABLE_NUMBA)")
        return 1
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, fast, slow in kernel_cases(args.dim, np.random.default_rng(0)):
        a, b = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<22}{a * 1e3:>10.2f}{b * 1e3:>10.2f}{b / a:>8.1f}x")

    if args.epochs:
        print(f"\nend-to-end: {args.epochs} epoch(s) on the default planted graph, dim {args.dim}")
        for disable in (False, True):
            r = epoch_time(disable, args.epochs, args.dim)
            print(f"  {r['backend']:<6} {r['seconds']:.2f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
