"""Warping a phantom, and how the loss sees the misalignment.

Run:  python demos/02_warp_and_similarity.py
"""

import numpy as np

from voxreg import tensor as T
from voxreg.loss import LossConfig, lncc_map, total_loss
from voxreg.metrics import dice, displacement_stats, jacobian_fnj
from voxreg.synth import SynthSpec, make_pair
from voxreg.warp import invert_field, sample_trilinear, warp_nearest

# %% A synthetic pair: m(p) = f(p + u_true(p)).
pair = make_pair(SynthSpec(dims=(32, 32, 32), seed=1))
print("labels:", len(np.unique(pair.labels_fixed)) - 1, "| FNJ of u_true:", jacobian_fnj(pair.u_true)[0])
print("mean |u_true| per axis:", np.round(displacement_stats(pair.u_true), 3))

# %% The field that maps m back onto f is the inverse of u_true.
v = invert_field(pair.u_true)
recovered = sample_trilinear(pair.moving, v.astype(np.float32))
for name, img in (("moving", pair.moving), ("moving warped by inverse", recovered)):
    print(f"{name:>26s}: mean LNCC {lncc_map(pair.fixed, img).mean():.4f}")

# %% Labels move with nearest-neighbour lookup.
print("Dice before %.3f, after %.3f" % (
    dice(pair.labels_moving, pair.labels_fixed)[1],
    dice(warp_nearest(pair.labels_moving, v), pair.labels_fixed)[1],
))

# %% The training loss at u = 0 and at the true inverse, for a few regularizer weights.
for alpha in (0.0, 1.0, 10.0):
    cfg = LossConfig(alpha=alpha)
    with T.no_grad():
        zero = total_loss(pair.fixed, pair.moving, T.Tensor(np.zeros_like(v, dtype=np.float32)), cfg)
        best = total_loss(pair.fixed, pair.moving, T.Tensor(v.astype(np.float32)), cfg)
    print(f"alpha {alpha:>4}: loss(u=0) {zero.total.item():+.4f}   loss(u=inverse) {best.total.item():+.4f}")
