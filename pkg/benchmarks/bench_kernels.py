"""Compare the numba and pure-numpy kernel paths.

Part 1 times each kernel pair directly on the shapes that occur when
training the default TCN (batch 64, window 60) and checks that the two paths
agree. Part 2 times a whole TCN training step in two subprocesses, one with
``FMGTELEOP_DISABLE_NUMBA=1``, because the backend is fixed at import.

    python benchmarks/bench_kernels.py [--repeats 5] [--batch 64]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from fmgteleop.autodiff import kernels


def best_of(fn, repeats):
    fn()  # warm-up (includes numba compilation on first call)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(batch, rng):
    frames = batch * 60
    # im2col/col2im on a grid large enough to bypass the unrolled conv path
    xpad = rng.normal(size=(batch, 16, 18, 18)).astype(np.float32)
    cols = rng.normal(size=(batch * 16 * 16, 16 * 9)).astype(np.float32)
    # batchnorm on spatial-encoder and temporal-block activations
    spatial = rng.normal(size=(frames, 16, 28)).astype(np.float32)
    temporal = rng.normal(size=(batch, 64, 60)).astype(np.float32)
    ones16, zeros16 = np.ones(16, np.float32), np.zeros(16, np.float32)
    xhat = rng.normal(size=spatial.shape).astype(np.float32)
    k16 = np.full(16, 0.01, np.float32)
    return [
        ("im2col2d", (xpad, 3, 3, 1, 1, 16, 16)),
        ("col2im2d", (cols, batch, 16, 18, 18, 3, 3, 1, 1, 16, 16)),
        ("bn_moments", (spatial,)),
        ("bn_moments", (temporal,)),
        ("bn_normalize", (spatial, zeros16, ones16, ones16, zeros16)),
        ("bn_backward", (spatial, xhat, k16, np.float32(spatial.shape[0] * 28))),
    ]


def _max_rel(a, b):
    a, b = (a,) if isinstance(a, np.ndarray) else a, (b,) if isinstance(b, np.ndarray) else b
    worst = 0.0
    for u, v in zip(a, b):
        scale = max(float(np.abs(u).max()), 1e-30)
        worst = max(worst, float(np.abs(u.astype(np.float64) - v).max()) / scale)
    return worst


def bench_kernels(batch, repeats):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14} {'shape':<22} {'numpy ms':>9} {'numba ms':>9} {'speedup':>8} {'max rel diff':>13}")
    for name, args in kernel_cases(batch, rng):
        f_np = getattr(kernels, f"{name}_numpy")
        f_nb = getattr(kernels, f"{name}_numba")
        t_np = best_of(lambda: f_np(*args), repeats)
        t_nb = best_of(lambda: f_nb(*args), repeats)
        diff = _max_rel(f_np(*args), f_nb(*args))
        shape = "x".join(map(str, args[0].shape))
        print(f"{name:<14} {shape:<22} {t_np * 1e3:>9.2f} {t_nb * 1e3:>9.2f} {t_np / t_nb:>7.2f}x {diff:>13.2e}")


_STEP_SCRIPT = """
import json, sys, time
import numpy as np
from fmgteleop import autodiff as ad
from fmgteleop.autodiff import kernels
from fmgteleop.models import ModelSpec, build_model
batch, repeats = int(sys.argv[1]), int(sys.argv[2])
model = build_model(ModelSpec("tcn"))
rng = np.random.default_rng(0)
X = rng.normal(0, 50, (batch, 60, 4, 7)).astype(np.float32)
Y = rng.uniform(0, 90, (batch, 10)).astype(np.float32)
def step():
    loss = ad.mse_loss(model.forward(X, training=True), Y)
    model.store.zero_grad(); loss.backward(); ad.adam_step(model.store)
step()
times = []
for _ in range(repeats):
    t0 = time.perf_counter(); step(); times.append(time.perf_counter() - t0)
t0 = time.perf_counter(); model.predict_batch(X, batch); infer = time.perf_counter() - t0
print(json.dumps({"backend": kernels.BACKEND, "step": min(times), "infer": infer}))
"""


def bench_training_step(batch, repeats):
    print(f"\nTCN training step, batch {batch} (best of {repeats}):")
    for disable in ("0", "1"):
        env = dict(os.environ, FMGTELEOP_DISABLE_NUMBA=disable)
        out = subprocess.run([sys.executable, "-c", _STEP_SCRIPT, str(batch), str(repeats)],
                             env=env, capture_output=True, text=True, check=True)
        r = json.loads(out.stdout.strip().splitlines()[-1])
        print(f"  {r['backend']:<6} step {r['step'] * 1e3:8.1f} ms  ({r['step'] / batch * 1e3:.2f} ms/window)  "
              f"inference {batch / r['infer']:8.0f} windows/s")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--batch", type=int, default=64)
    args = ap.parse_args(argv)
    if not kernels.NUMBA_AVAILABLE:
        sys.exit("numba is not installed; nothing to compare")
    bench_kernels(args.batch, args.repeats)
    bench_training_step(args.batch, args.repeats)


if __name__ == "__main__":
    main()
