"""Finite-difference verification of every differentiable operation.

Each check evaluates the scalar ``L = sum(op(inputs) * R)`` for a fixed
random projection ``R``, takes the tape gradient of ``L`` and compares it
elementwise with central differences, using the error measure
``|analytic - numeric| / max(1, |analytic|)``.  Everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from . import conv as _conv
from . import loss as _loss
from . import tensor as T
from .warp import warp_trilinear

__all__ = ["CheckResult", "numeric_gradient", "check_op", "run_suite", "OP_TOL", "TOTAL_LOSS_TOL"]

OP_TOL = 1e-4
TOTAL_LOSS_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.tol)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28s} max rel err {self.max_error:.3e} (tol {self.tol:.0e})"


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_op(
    name: str,
    op: Callable[..., T.Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    tol: float = OP_TOL,
    wrt: Sequence[int] | None = None,
    h: float = 1e-4,
) -> CheckResult:
    """Compare tape and finite-difference gradients of ``op`` w.r.t. ``inputs[wrt]``."""
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    wrt = range(len(inputs)) if wrt is None else wrt
    with T.no_grad():
        proj = rng.standard_normal(op(*[T.Tensor(a) for a in inputs]).shape)

    def scalar(arrays) -> float:
        with T.no_grad():
            return float(np.sum(op(*[T.Tensor(a) for a in arrays]).data * proj))

    tensors = [T.Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(inputs)]
    with T.recording() as tape:
        out = op(*tensors)
        loss = T.tsum(T.mul(out, T.Tensor(proj))) if out.size > 1 else T.scale(out, float(proj))
        tape.backward(loss)

    worst = 0.0
    for i in wrt:
        def f_i(x, i=i):
            arrays = list(inputs)
            arrays[i] = x
            return scalar(arrays)

        num = numeric_gradient(f_i, inputs[i], h)
        ana = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(num)
        err = np.abs(ana - num) / np.maximum(1.0, np.abs(ana))
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return CheckResult(name, worst, tol)


def _away_from_zero(a: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return np.where(np.abs(a) < margin, np.sign(a + 1e-12) * margin * 2, a)


def _safe_field(rng, dims, scale=1.5, margin=0.02) -> np.ndarray:
    """Displacements whose sample points stay clear of lattice planes and the box edges."""
    grid = np.indices(dims, dtype=np.float64)
    u = rng.uniform(-scale, scale, size=(3,) + tuple(dims))
    c = grid + u
    frac = c - np.round(c)
    u = np.where(np.abs(frac) < margin, u + 2 * margin, u)
    return u


def run_suite(seed: int = 0) -> list[CheckResult]:
    """Check every differentiable op on random double-precision inputs."""
    rng = np.random.default_rng(seed)

    def r(*shape):
        return rng.standard_normal(shape)

    res: list[CheckResult] = []

    res.append(check_op("add", T.add, [r(2, 3, 4), r(2, 3, 4)], rng))
    res.append(check_op("sub", T.sub, [r(2, 3, 4), r(2, 3, 4)], rng))
    res.append(check_op("mul", T.mul, [r(2, 3, 4), r(2, 3, 4)], rng))
    res.append(check_op("scale", lambda a: T.scale(a, -1.7), [r(3, 4)], rng))
    res.append(check_op("leaky_relu", lambda a: T.leaky_relu(a, 0.2), [_away_from_zero(r(4, 5))], rng))
    res.append(check_op("square", T.square, [r(3, 4)], rng))
    res.append(check_op("sum", T.tsum, [r(2, 3, 4)], rng))
    res.append(check_op("mean", T.mean, [r(2, 3, 4)], rng))
    res.append(check_op("concat", lambda a, b: T.concat([a, b], axis=0), [r(2, 3, 3, 3), r(1, 3, 3, 3)], rng))
    res.append(check_op("slice", lambda a: a[1:, :2, ::2], [r(3, 4, 5)], rng))

    for d in (1, 2, 4):
        res.append(
            check_op(
                f"conv3d k3 d{d}",
                lambda x, w, b, d=d: _conv.conv3d(x, w, b, dilation=d),
                [r(2, 5, 5, 5), r(3, 2, 3, 3, 3), r(3)],
                rng,
            )
        )
    res.append(
        check_op(
            "conv3d k3 stride2",
            lambda x, w, b: _conv.conv3d(x, w, b, stride=2),
            [r(2, 6, 6, 6), r(3, 2, 3, 3, 3), r(3)],
            rng,
        )
    )
    res.append(check_op("conv3d k1", lambda x, w, b: _conv.conv3d(x, w, b), [r(3, 4, 4, 4), r(2, 3, 1, 1, 1), r(2)], rng))
    res.append(
        check_op(
            "conv3d k1 stride2",
            lambda x, w, b: _conv.conv3d(x, w, b, stride=2),
            [r(3, 4, 4, 4), r(2, 3, 1, 1, 1), r(2)],
            rng,
        )
    )
    res.append(check_op("upsample_trilinear", _conv.upsample_trilinear, [r(2, 4, 4, 4)], rng))

    def pipeline(x, w):
        return T.tsum(T.leaky_relu(_conv.conv3d(x, w, dilation=2), 0.2))

    res.append(check_op("conv->leaky_relu->sum", pipeline, [r(2, 5, 5, 5), r(2, 2, 3, 3, 3)], rng))

    dims = (6, 5, 7)
    res.append(check_op("warp_trilinear", warp_trilinear, [r(*dims), _safe_field(rng, dims)], rng))

    cfg = _loss.LossConfig(window=2, eps=1e-5)
    f0 = r(7, 7, 7)
    res.append(
        check_op("lncc", lambda f, w: _loss.lncc(f, w, cfg), [f0, 0.6 * f0 + 0.8 * r(7, 7, 7)], rng)
    )
    res.append(check_op("sobolev_norm", _loss.sobolev_norm, [r(3, 5, 4, 6)], rng))

    tdims = (8, 8, 8)
    fixed = gaussian_filter(r(*tdims), 1.0)
    moving = gaussian_filter(r(*tdims), 1.0)
    tcfg = _loss.LossConfig(window=2, alpha=0.5)
    res.append(
        check_op(
            "total_loss",
            lambda u: _loss.total_loss(fixed, moving, u, tcfg).total,
            [_safe_field(rng, tdims, scale=1.0)],
            rng,
            tol=TOTAL_LOSS_TOL,
        )
    )
    return res
