"""Compiled vs numpy kernels: per-kernel timings and one M-16 training step.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 128]

The end-to-end step is timed in fresh interpreters with DOCCLEAN_BACKEND set,
since the backend is fixed at import time.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from docclean import _pykernels

try:
    from docclean import _ckernels
except ImportError:
    _ckernels = None

STEP = """
import time, numpy as np
from docclean import kernels, perceptual as P, train as T
rng = np.random.default_rng(0)
x = rng.random((2, {n}, {n}, 3)).astype(np.float32)
y = rng.random((2, {n}, {n}, 1)).astype(np.float32)
tr = T.Trainer(T.TrainConfig(batch_size=2, weights=P.LossWeights(10, 0, 0)))
tr.train_step(x, y)
t = time.perf_counter()
for _ in range({r}):
    tr.train_step(x, y)
print(kernels.BACKEND, (time.perf_counter() - t) / {r})
"""


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_cases(n):
    rng = np.random.default_rng(0)
    for cin, cout in ((3, 16), (16, 16), (32, 32), (64, 64)):
        x = rng.standard_normal((2, n, n, cin)).astype(np.float32)
        k = rng.standard_normal((3, 3, cin, cout)).astype(np.float32)
        dy = rng.standard_normal((2, n, n, cout)).astype(np.float32)
        yield f"conv3x3 {cin:>2}->{cout:<2}", lambda m, x=x, k=k: m.conv3x3(x, k)
        yield f"kgrad   {cin:>2}->{cout:<2}", lambda m, x=x, dy=dy: m.conv3x3_kernel_grad(x, dy)
    x2 = rng.standard_normal((2 * n * n, 32)).astype(np.float32)
    yield "bn_stats 32ch", lambda m: m.bn_stats(x2)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=128, help="spatial size of the test tensors")
    args = ap.parse_args()

    print(f"{'kernel':<18}{'numpy ms':>10}{'compiled ms':>13}{'speedup':>9}")
    for name, fn in kernel_cases(args.size):
        tp = best(lambda: fn(_pykernels), args.repeat) * 1e3
        if _ckernels is None:
            print(f"{name:<18}{tp:>10.2f}{'n/a':>13}")
            continue
        tc = best(lambda: fn(_ckernels), args.repeat) * 1e3
        print(f"{name:<18}{tp:>10.2f}{tc:>13.2f}{tp / tc:>8.2f}x")

    print(f"\nM-16 training step, batch 2 at {args.size}x{args.size}:")
    code = STEP.format(n=args.size, r=args.repeat)
    for backend in ("python", "compiled"):
        env = dict(os.environ, DOCCLEAN_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
        if out.returncode != 0:
            print(f"  {backend:<9} unavailable")
            continue
        _, secs = out.stdout.split()
        print(f"  {backend:<9} {float(secs) * 1e3:8.1f} ms/step")


if __name__ == "__main__":
    main()
