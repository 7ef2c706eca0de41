"""Train a reduced network on a handful of small synthetic pairs.

A few minutes on one core.  The full-size run used for acceptance lives in
tests/test_acceptance.py.

Run:  python demos/03_train_small.py
"""

import time

import numpy as np

from voxreg.loss import LossConfig
from voxreg.metrics import dice, jacobian_fnj
from voxreg.network import ArchConfig, param_count, build_network
from voxreg.synth import RECOVERY_SPEC, make_dataset
from voxreg.trainer import TrainConfig, register, train
from voxreg.warp import invert_field, warp_nearest
from dataclasses import replace

spec = replace(RECOVERY_SPEC, dims=(24, 24, 24), blobs=20, sigma=5.0, amplitude=2.0)
pairs = make_dataset(spec, 4)
arch = ArchConfig(levels=3, base_channels=8, max_channels=32, branch_channels=8, refine_blocks=1)
print("parameters:", param_count(build_network(arch)))


def summary(params):
    epe, mag, d0, d1, fnj = [], [], [], [], []
    for p in pairs:
        u, _ = register(params, p.fixed, p.moving)
        v = invert_field(p.u_true)
        epe.append(np.linalg.norm(u - v, axis=0).mean())
        mag.append(np.linalg.norm(v, axis=0).mean())
        d0.append(dice(p.labels_moving, p.labels_fixed)[1])
        d1.append(dice(warp_nearest(p.labels_moving, u), p.labels_fixed)[1])
        fnj.append(jacobian_fnj(u)[0])
    return f"EPE {np.mean(epe):.3f} (|v| {np.mean(mag):.3f})  Dice {np.mean(d0):.3f} -> {np.mean(d1):.3f}  FNJ {max(fnj):.4f}"


def progress(step, params, row):
    if step % 100 == 0:
        print(f"step {step:4d}  loss {row.total:+.4f}  {summary(params)}")


t0 = time.perf_counter()
res = train(pairs, TrainConfig(lr=1e-3, epochs=100, max_steps=400, loss=LossConfig(alpha=1.0)), arch, callback=progress)
print(f"done in {time.perf_counter() - t0:.0f}s; loss {res.log[0].total:+.4f} -> {res.log[-1].total:+.4f}")
