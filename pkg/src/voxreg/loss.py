"""Unsupervised registration objective: windowed correlation plus smoothness.

The similarity is the locally normalized cross-correlation (LNCC) summed
over voxels.  At each voxel ``p`` the window is the cube ``p + [-r, r]^3``
clipped to the volume; local means and (co)variances are computed over that
clipped window from separable running sums, so each window pass is O(N).

The regularizer is the quadratic Sobolev seminorm of the displacement with
forward differences and a replicate boundary (the last difference along each
axis is zero).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, add, apply_op, scale
from .warp import warp_trilinear

__all__ = [
    "LossConfig",
    "LossTerms",
    "box_sum",
    "lncc_map",
    "lncc",
    "sobolev_norm",
    "total_loss",
]


@dataclass(frozen=True)
class LossConfig:
    """Window half-width ``window`` (4 -> 9x9x9), weight ``alpha`` and variance guard ``eps``."""

    window: int = 4
    alpha: float = 1.0
    eps: float = 1e-5

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window half-width must be >= 1, got {self.window}")
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


def _box_axis(a: np.ndarray, r: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    cs = np.cumsum(a, axis=axis)
    zero = np.zeros_like(np.take(cs, [0], axis=axis))
    cs = np.concatenate([zero, cs], axis=axis)
    idx = np.arange(n)
    hi = np.take(cs, np.minimum(idx + r + 1, n), axis=axis)
    lo = np.take(cs, np.maximum(idx - r, 0), axis=axis)
    return hi - lo


def box_sum(a: np.ndarray, r: int) -> np.ndarray:
    """Sum of ``a`` over the clipped cube ``[-r, r]^3`` around every voxel."""
    for axis in range(a.ndim):
        a = _box_axis(a, r, axis)
    return a


def _stats(f: np.ndarray, w: np.ndarray, r: int):
    n = box_sum(np.ones_like(f), r)
    sf, sw = box_sum(f, r), box_sum(w, r)
    sff, sww, sfw = box_sum(f * f, r), box_sum(w * w, r), box_sum(f * w, r)
    cross = sfw - sf * sw / n
    vf = sff - sf * sf / n
    vw = sww - sw * sw / n
    return n, sf, sw, cross, vf, vw


def lncc_map(f: np.ndarray, w: np.ndarray, window: int = 4, eps: float = 1e-5) -> np.ndarray:
    """Per-voxel squared local correlation, each value in [0, 1]."""
    f = np.asarray(f, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if f.shape != w.shape:
        raise ShapeError(f"lncc: dims mismatch {f.shape} vs {w.shape}")
    _, _, _, cross, vf, vw = _stats(f, w, window)
    return cross * cross / (vf * vw + eps)


def lncc(f, w, cfg: LossConfig | None = None) -> Tensor:
    """Summed LNCC between ``f`` and ``w`` as a differentiable scalar.

    Either argument may be a plain array.  Internals run in float64; the
    result and gradients take the dtype of the inputs.
    """
    cfg = cfg or LossConfig()
    f = f if isinstance(f, Tensor) else Tensor(np.asarray(f))
    w = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=f.dtype))
    if f.shape != w.shape:
        raise ShapeError(f"lncc: dims mismatch {f.shape} vs {w.shape}")
    r, eps = cfg.window, cfg.eps
    fd = f.data.astype(np.float64)
    wd = w.data.astype(np.float64)
    n, sf, sw, cross, vf, vw = _stats(fd, wd, r)
    den = vf * vw + eps
    value = np.sum(cross * cross / den)
    dtype = np.result_type(f.dtype, w.dtype)

    def bw(g):
        g = float(g)
        dc = g * 2 * cross / den
        k = g * cross * cross / (den * den)
        dvf, dvw = -k * vw, -k * vf
        grads = []
        for x, sx, so, dvx, other, need in (
            (fd, sf, sw, dvf, wd, f.requires_grad),
            (wd, sw, sf, dvw, fd, w.requires_grad),
        ):
            if not need:
                grads.append(None)
                continue
            d_sx = -dc * so / n - 2 * dvx * sx / n
            gx = box_sum(d_sx, r) + 2 * x * box_sum(dvx, r) + other * box_sum(dc, r)
            grads.append(gx.astype(dtype))
        return grads

    return apply_op("lncc", (f, w), np.asarray(value, dtype=dtype), bw)


def sobolev_norm(u: Tensor) -> Tensor:
    """Sum over voxels and components of the squared forward-difference gradient."""
    if u.ndim != 4 or u.shape[0] != 3:
        raise ShapeError(f"displacement field must be (3, X, Y, Z), got {u.shape}")
    x = u.data
    diffs = [np.diff(x, axis=a) for a in (1, 2, 3)]
    value = sum(np.sum(d.astype(np.float64) ** 2) for d in diffs)

    def bw(g):
        out = np.zeros_like(x)
        for a, d in zip((1, 2, 3), diffs):
            two_d = 2 * g * d
            hi = [slice(None)] * 4
            lo = [slice(None)] * 4
            hi[a], lo[a] = slice(1, None), slice(None, -1)
            out[tuple(hi)] += two_d
            out[tuple(lo)] -= two_d
        return (out,)

    return apply_op("sobolev", (u,), np.asarray(value, dtype=x.dtype), bw)


@dataclass
class LossTerms:
    """Total loss tensor plus its two scalar parts (for logging)."""

    total: Tensor
    lncc_term: float
    reg_term: float
    warped: Tensor


def total_loss(f, m, u: Tensor, cfg: LossConfig | None = None) -> LossTerms:
    """``-lncc(f, m o (id + u)) / N + alpha * sobolev(u) / N`` with ``N`` voxels."""
    cfg = cfg or LossConfig()
    if u.ndim != 4 or u.shape[0] != 3:
        raise ShapeError(f"displacement field must be (3, X, Y, Z), got {u.shape}")
    f_arr = f.data if isinstance(f, Tensor) else np.asarray(f)
    n = float(np.prod(u.shape[1:]))
    if f_arr.shape != u.shape[1:]:
        raise ShapeError(f"dims mismatch: fixed {f_arr.shape} vs field {u.shape[1:]}")
    warped = warp_trilinear(m, u)
    sim = scale(lncc(f, warped, cfg), -1.0 / n)
    if cfg.alpha == 0:
        return LossTerms(sim, sim.item(), 0.0, warped)
    reg = scale(sobolev_norm(u), cfg.alpha / n)
    return LossTerms(add(sim, reg), sim.item(), reg.item(), warped)
