"""Spatial transformer: resample a volume at ``p + u(p)``.

Sample coordinates are clamped to the grid box, so samples that leave the
volume take the nearest edge value.  Intensities use trilinear weights
``prod_d (1 - |c_d - q_d|)`` over the 8 surrounding lattice points; labels use
nearest-neighbour lookup with round-half-away-from-zero.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, apply_op

__all__ = [
    "SampleSpec",
    "warp_trilinear",
    "warp_nearest",
    "sample_trilinear",
    "invert_field",
]

_MODES = {"intensity": "trilinear", "labels": "nearest"}


class SampleSpec:
    """Boundary and interpolation choice for one kind of data."""

    boundary = "clamp"

    def __init__(self, kind: str = "intensity"):
        if kind not in _MODES:
            raise ValueError(f"unknown data kind {kind!r}")
        self.kind = kind
        self.order = _MODES[kind]


def _check(vol_shape, u_shape):
    if len(u_shape) != 4 or u_shape[0] != 3:
        raise ShapeError(f"displacement field must be (3, X, Y, Z), got {u_shape}")
    if tuple(vol_shape) != tuple(u_shape[1:]):
        raise ShapeError(f"dims mismatch: volume {tuple(vol_shape)} vs field {tuple(u_shape[1:])}")


def _stencil(u: np.ndarray):
    """Corner indices, fractional offsets and in-box masks for ``id + u``."""
    dims = u.shape[1:]
    grid = np.indices(dims, dtype=u.dtype)
    lo, frac, inside = [], [], []
    for d, n in enumerate(dims):
        c = grid[d] + u[d]
        inside.append((c >= 0) & (c <= n - 1))
        c = np.clip(c, 0, n - 1)
        i0 = np.clip(np.floor(c), 0, max(n - 2, 0)).astype(np.intp)
        lo.append(i0)
        frac.append(c - i0)
    return lo, frac, inside


def _corner_flat(lo, dims, bits):
    idx = []
    for d in range(3):
        i = lo[d] + bits[d]
        if bits[d]:
            i = np.minimum(i, dims[d] - 1)
        idx.append(i)
    return (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]


_CORNERS = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]


def _trilinear(m: np.ndarray, u: np.ndarray, need_grad: bool = False):
    dims = m.shape
    lo, frac, inside = _stencil(u)
    one = m.dtype.type(1)
    w1 = frac
    w0 = [one - t for t in frac]
    flat_m = m.reshape(-1)
    out = np.zeros(dims, dtype=m.dtype)
    flats, weights, vals = [], [], []
    for bits in _CORNERS:
        flat = _corner_flat(lo, dims, bits)
        wx = w1[0] if bits[0] else w0[0]
        wy = w1[1] if bits[1] else w0[1]
        wz = w1[2] if bits[2] else w0[2]
        v = flat_m[flat]
        out += v * (wx * wy * wz)
        if need_grad:
            flats.append(flat)
            vals.append(v)
    cache = (lo, frac, inside, flats, vals) if need_grad else None
    return out, cache


def sample_trilinear(m: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Plain-array trilinear resampling of ``m`` at ``id + u`` (no tape)."""
    _check(m.shape, u.shape)
    return _trilinear(m, u.astype(m.dtype, copy=False))[0]


def warp_trilinear(m, u: Tensor) -> Tensor:
    """Warp ``m`` with the displacement ``u``; differentiable in both.

    ``m`` may be a :class:`Tensor` or a plain array of shape ``(X, Y, Z)``;
    ``u`` has shape ``(3, X, Y, Z)`` in voxel units.
    """
    if not isinstance(m, Tensor):
        m = Tensor(np.asarray(m, dtype=u.dtype))
    _check(m.shape, u.shape)
    if m.dtype != u.dtype:
        raise TypeError(f"dtype mismatch: volume {m.dtype} vs field {u.dtype}")
    out, cache = _trilinear(m.data, u.data, need_grad=True)
    dims = m.shape

    def bw(g):
        lo, frac, inside, flats, vals = cache
        one = g.dtype.type(1)
        w0 = [one - t for t in frac]
        dm = np.zeros(int(np.prod(dims)), dtype=np.float64)
        du = np.zeros((3,) + dims, dtype=g.dtype)
        for bits, flat, v in zip(_CORNERS, flats, vals):
            wts = [frac[d] if bits[d] else w0[d] for d in range(3)]
            if m.requires_grad:
                dm += np.bincount(
                    flat.ravel(), weights=(g * wts[0] * wts[1] * wts[2]).ravel(), minlength=dm.size
                )
            gv = g * v
            du[0] += gv * (wts[1] * wts[2]) * (1 if bits[0] else -1)
            du[1] += gv * (wts[0] * wts[2]) * (1 if bits[1] else -1)
            du[2] += gv * (wts[0] * wts[1]) * (1 if bits[2] else -1)
        for d in range(3):
            du[d] *= inside[d]
        dm_out = dm.reshape(dims).astype(g.dtype) if m.requires_grad else None
        return dm_out, du

    return apply_op("warp", (m, u), out, bw)


def warp_nearest(labels: np.ndarray, u) -> np.ndarray:
    """Warp an integer label volume by nearest-neighbour lookup (not differentiable)."""
    u = u.data if isinstance(u, Tensor) else np.asarray(u)
    labels = np.asarray(labels)
    _check(labels.shape, u.shape)
    dims = labels.shape
    grid = np.indices(dims, dtype=np.float64)
    idx = []
    for d, n in enumerate(dims):
        c = np.clip(grid[d] + u[d], 0, n - 1)
        # coordinates are non-negative after clamping, so this is half-away-from-zero
        idx.append(np.floor(c + 0.5).astype(np.intp))
    return labels[idx[0], idx[1], idx[2]]


def invert_field(u: np.ndarray, iterations: int = 10) -> np.ndarray:
    """Approximate inverse displacement by fixed-point iteration.

    Solves ``v(p) = -u(p + v(p))`` starting from ``v = 0``, so that
    ``id + v`` undoes ``id + u``.
    """
    u = np.asarray(u, dtype=np.float64)
    _check(u.shape[1:], u.shape)
    v = np.zeros_like(u)
    for _ in range(iterations):
        v = -np.stack([sample_trilinear(u[d], v) for d in range(3)])
    return v
