"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times the raw kernels on conv/pool shapes taken from the reference models,
then one training epoch of that model under each backend (each in a fresh
subprocess, since the backend is fixed at import).
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

KERNEL_CASES = [
    # (name, batch, channels, padded length, kernel, stride, dilation)
    ("pitch conv1 k128 s16", 64, 1, 1024, 128, 16, 1),
    ("pitch conv k5", 64, 48, 61, 5, 1, 1),
    ("audio conv k3 d8", 64, 16, 64, 3, 1, 8),
]
POOL_CASES = [("pool 2", 64, 32, 112, 2), ("pool 4", 64, 16, 496, 4)]

EPOCH_SNIPPET = """
import json, time
from trimlottery import kernels, tasks, training
ds = tasks.gen_pitch(n=1000, seed=0)
model = tasks.get_task("pitch").build(0)
start = time.perf_counter()
training.train(model, ds, training.TrainConfig(epochs={epochs}, seed=0))
print(json.dumps({{"backend": kernels.BACKEND, "seconds": time.perf_counter() - start}}))
"""


def time_kernels(mod, repeat):
    rows = {}
    rng = np.random.default_rng(0)
    for name, b, c, lp, k, s, d in KERNEL_CASES:
        l_out = (lp - d * (k - 1) - 1) // s + 1
        xp = rng.standard_normal((b, c, lp)).astype(np.float32)
        cols = mod.im2col(xp, k, s, d, l_out)
        rows[f"im2col {name}"] = min(timeit.repeat(lambda: mod.im2col(xp, k, s, d, l_out), number=5, repeat=repeat)) / 5
        rows[f"col2im {name}"] = min(timeit.repeat(lambda: mod.col2im(cols, c, lp, k, s, d), number=5,
                                                   repeat=repeat)) / 5
    for name, b, c, length, w in POOL_CASES:
        x = rng.standard_normal((b, c, length)).astype(np.float32)
        out, idx = mod.maxpool_forward(x, w)
        rows[f"maxpool fwd {name}"] = min(timeit.repeat(lambda: mod.maxpool_forward(x, w), number=5,
                                                        repeat=repeat)) / 5
        rows[f"maxpool bwd {name}"] = min(timeit.repeat(lambda: mod.maxpool_backward(out, idx, w, length), number=5,
                                                        repeat=repeat)) / 5
    return rows


def time_epochs(pure, epochs):
    env = dict(os.environ)
    if pure:
        env["TRIMLOTTERY_PURE_PYTHON"] = "1"
    else:
        env.pop("TRIMLOTTERY_PURE_PYTHON", None)
    out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET.format(epochs=epochs)], env=env, check=True,
                         capture_output=True, text=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--epochs", type=int, default=2)
    parser.add_argument("--skip-training", action="store_true")
    args = parser.parse_args(argv)

    from trimlottery import _kernels_py

    try:
        from trimlottery import _ckernels
    except ImportError:
        print("compiled extension not built; run `pip install --no-build-isolation -e .` first")
        return 1

    fast, slow = time_kernels(_ckernels, args.repeat), time_kernels(_kernels_py, args.repeat)
    print(f"{'kernel':32s} {'cython ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name in fast:
        print(f"{name:32s} {fast[name] * 1e3:10.3f} {slow[name] * 1e3:10.3f} {slow[name] / fast[name]:8.2f}")

    if not args.skip_training:
        c, p = time_epochs(False, args.epochs), time_epochs(True, args.epochs)
        print(f"\npitch training, {args.epochs} epochs on 600 training samples:")
        print(f"  {c['backend']:7s} {c['seconds']:.2f}s")
        print(f"  {p['backend']:7s} {p['seconds']:.2f}s  ({p['seconds'] / c['seconds']:.2f}x)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
