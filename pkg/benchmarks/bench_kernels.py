#!/usr/bin/env python3
"""Compare the numba and pure-numpy kernel paths.

Kernel timings call both implementations directly in one process. The
``--end-to-end`` mode times a training step and a per-image adaptation in
two subprocesses, one with ``ATTA_DISABLE_NUMBA=1``.

    python3 benchmarks/bench_kernels.py --repeat 50
    python3 benchmarks/bench_kernels.py --end-to-end
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from atta import kernels


def kernel_cases(size, rng):
    x16 = rng.random((size, size, 16), dtype=np.float32)
    x32 = rng.random((size, size, 32), dtype=np.float32)
    cols = rng.random((size * size, 9 * 32), dtype=np.float32)
    z = rng.standard_normal((size * size, 32)).astype(np.float32)
    mean, std = z.mean(axis=0), z.std(axis=0)
    inv = (1.0 / np.sqrt(std ** 2 + 1e-5)).astype(np.float32)
    gamma = np.ones(32, np.float32)
    beta = np.zeros(32, np.float32)
    xhat, out = kernels.bn_relu_train_forward_np(z, mean, inv, gamma, beta)
    dout = rng.standard_normal(z.shape).astype(np.float32)
    scores = np.r_[rng.normal(-2, 0.3, 5000), rng.normal(2, 0.3, 5000)]
    em_args = (scores, np.array([0.5, 0.5]), np.array([-1.0, 1.0]), np.array([1.0, 1.0]))
    return {
        "im2col3x3 (16ch)": (x16,),
        "im2col3x3 (32ch)": (x32,),
        "col2im3x3": (cols, size, size, 32),
        "channel_stats": (z,),
        "bn_relu_train_forward": (z, mean, inv, gamma, beta),
        "bn_relu_train_backward": (dout, xhat, out, inv, gamma),
        "em_step (10k)": em_args,
    }


def bench_kernels(size, repeat):
    rng = np.random.default_rng(0)
    rows = []
    for label, args in kernel_cases(size, rng).items():
        base = label.split(" ")[0]
        f_np = getattr(kernels, base + "_np")
        f_nb = getattr(kernels, base + "_nb")
        r_np, r_nb = f_np(*args), f_nb(*args)
        r_np = r_np if isinstance(r_np, tuple) else (r_np,)
        r_nb = r_nb if isinstance(r_nb, tuple) else (r_nb,)
        err = max(float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))
                  for a, b in zip(r_np, r_nb))
        t_np = min(timeit.repeat(lambda: f_np(*args), number=1, repeat=repeat))
        t_nb = min(timeit.repeat(lambda: f_nb(*args), number=1, repeat=repeat))
        rows.append((label, t_np * 1e3, t_nb * 1e3, t_np / t_nb, err))
    return rows


_E2E = r"""
import json, time
import numpy as np
from atta import kernels
from atta.adaptation import AdaptConfig, adapt_image
from atta.nn import ModelCheckpoint, init_net
from atta.scenes import CorruptionSpec, SceneSpec, generate_scene
from atta.trainer import _train_step

scenes = [generate_scene(SceneSpec(seed=i, ood_enabled=False)) for i in range(8)]
images = np.stack([s.image.transpose(1, 2, 0) for s in scenes]).astype(np.float32)
labels = np.stack([s.labels for s in scenes]).astype(np.int64)
net = init_net()
_train_step(net, images, labels)
t0 = time.perf_counter()
for _ in range(5):
    _train_step(net, images, labels)
train_ms = (time.perf_counter() - t0) / 5 * 1e3
ckpt = ModelCheckpoint(net, -1.0, 1.0)
img = generate_scene(SceneSpec(seed=99, corruption=CorruptionSpec(enabled=True))).image
adapt_image(ckpt, img, AdaptConfig())
t0 = time.perf_counter()
for _ in range(10):
    adapt_image(ckpt, img, AdaptConfig())
adapt_ms = (time.perf_counter() - t0) / 10 * 1e3
print(json.dumps({"backend": kernels.BACKEND, "train_step_ms": train_ms, "adapt_image_ms": adapt_ms}))
"""


def bench_end_to_end():
    out = []
    for disable in ("0", "1"):
        env = dict(os.environ, ATTA_DISABLE_NUMBA=disable)
        res = subprocess.run([sys.executable, "-c", _E2E], env=env, capture_output=True, text=True, check=True)
        out.append(json.loads(res.stdout.strip().splitlines()[-1]))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=64, help="square map side for the conv kernels")
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args()

    print(f"{'kernel':26s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for label, t_np, t_nb, speed, err in bench_kernels(args.size, args.repeat):
        print(f"{label:26s} {t_np:10.3f} {t_nb:10.3f} {speed:8.2f} {err:11.2e}")
    if args.end_to_end:
        print()
        print(f"{'backend':8s} {'train step (8 imgs) ms':>24s} {'adapt_image ms':>16s}")
        for row in bench_end_to_end():
            print(f"{row['backend']:8s} {row['train_step_ms']:24.1f} {row['adapt_image_ms']:16.1f}")


if __name__ == "__main__":
    main()
