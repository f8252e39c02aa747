"""Compare the numba and numpy kernel paths.

Kernel timings call both implementations directly in one process. The
training-step timing runs in two subprocesses, one with
FUNDSEG_DISABLE_NUMBA=1, because the backend is fixed at import.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

STEP = """
import time, numpy as np
from fundseg import _kernels, maskhead as mh, autodiff as ad, training as tr
from fundseg.autodiff import Tensor
m = mh.build(mh.MaskHeadConfig(), seed=0)
x = Tensor(np.random.default_rng(0).random((8, 1, 64, 64)))
y = (np.random.default_rng(1).random((8, 2, 64, 64)) > 0.5).astype(float)
def step():
    loss = tr.batch_loss(mh.forward(m, x), y, 0.5)
    ad.backward(loss)
step()
t = min(timeit.repeat(step, number=1, repeat={repeat}))
print(_kernels.BACKEND, t)
"""


def best(fn, repeat):
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(repeat):
    from fundseg import _kernels as k
    from fundseg import contours as ct
    rng = np.random.default_rng(0)
    xp = rng.random((8, 16, 66, 66))
    cols = k.im2col_np(xp, 3, 3, 1, 64, 64)
    poly = ct.ellipse((31.5, 32.0), 20.0, 15.0, 360)
    xs, ys = poly[:, 0].copy(), poly[:, 1].copy()
    cases = {
        "im2col 8x16x64x64 k3": (lambda f: f(xp, 3, 3, 1, 64, 64), "im2col"),
        "col2im 8x16x64x64 k3": (lambda f: f(cols, 16, 66, 66, 3, 3, 1, 64, 64), "col2im"),
        "rasterize 360-gon 64x64": (lambda f: f(xs, ys, 64, 64, 1e-9), "rasterize"),
    }
    print(f"{'kernel':28s} {'numpy (ms)':>11s} {'numba (ms)':>11s}")
    for name, (call, base) in cases.items():
        t_np = best(lambda: call(getattr(k, base + "_np")), repeat)
        if k.HAVE_NUMBA:
            t_nb = best(lambda: call(getattr(k, base + "_nb")), repeat)
            nb = f"{1e3 * t_nb:11.3f}"
        else:
            nb = f"{'n/a':>11s}"
        print(f"{name:28s} {1e3 * t_np:11.3f} {nb}")


def step_table(repeat):
    print("\nforward+backward, batch 8, 64x64, default mask head")
    for flag in ("0", "1"):
        env = dict(os.environ, FUNDSEG_DISABLE_NUMBA=flag)
        code = "import timeit\n" + STEP.format(repeat=repeat)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        backend, t = out.stdout.split()
        print(f"  {backend:6s} {float(t):.3f} s")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    kernel_table(args.repeat)
    step_table(args.repeat)


if __name__ == "__main__":
    main()
