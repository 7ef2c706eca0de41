"""Tape autodiff in a few lines, then the finite-difference suite.

Run:  python demos/01_autodiff_and_gradcheck.py
"""

import numpy as np

from voxreg import tensor as T
from voxreg.conv import conv3d
from voxreg.gradcheck import run_suite

# %% A tiny graph: L = sum(x^2) has gradient 2x.
x = T.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
with T.recording() as tape:
    loss = T.tsum(T.square(x))
    tape.backward(loss)
print("L =", loss.item(), " dL/dx =", x.grad)

# %% Same machinery through a dilated convolution and a leaky ReLU.
rng = np.random.default_rng(0)
inp = T.Tensor(rng.standard_normal((2, 6, 6, 6)), requires_grad=True)
w = T.Tensor(rng.standard_normal((4, 2, 3, 3, 3)) * 0.1, requires_grad=True)
with T.recording() as tape:
    out = T.leaky_relu(conv3d(inp, w, dilation=2), 0.2)
    tape.backward(T.mean(out))
print("conv output", out.shape, "| grad norms: input %.4f, weight %.4f" % (np.linalg.norm(inp.grad), np.linalg.norm(w.grad)))

# %% Every differentiable op against central differences (double precision).
for res in run_suite(seed=0):
    print(res)
