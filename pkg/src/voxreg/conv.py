"""3D convolution and trilinear upsampling kernels plus their tape ops.

Convolutions are cross-correlations over ``(C, X, Y, Z)`` feature maps with
zero padding.  The stride-1 path unfolds only the x/y taps of the kernel and
folds the z taps into a single matrix product followed by shifted adds,
which keeps the unfolded buffer at ``k**2`` instead of ``k**3`` copies of the
input.  Strided convolutions use a plain im2col (their output is 8x smaller,
so the buffer is cheap).
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, apply_op

__all__ = [
    "conv_output_size",
    "conv3d_forward",
    "conv3d_backward",
    "conv3d",
    "upsample2_forward",
    "upsample2_backward",
    "upsample_trilinear",
]


def conv_output_size(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _validate(x: np.ndarray, w: np.ndarray, stride: int, dilation: int, padding: int):
    if x.ndim != 4:
        raise ShapeError(f"conv3d input must be (C, X, Y, Z), got {x.shape}")
    if w.ndim != 5 or w.shape[2] != w.shape[3] or w.shape[3] != w.shape[4]:
        raise ShapeError(f"conv3d weight must be (Cout, Cin, k, k, k), got {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv3d: weight expects {w.shape[1]} input channels, got {x.shape[0]}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride {stride} / padding {padding}")
    if min(x.shape) < 1:
        raise ShapeError(f"non-positive dims {x.shape}")
    out = tuple(conv_output_size(n, k, stride, dilation, padding) for n in x.shape[1:])
    if min(out) < 1:
        raise ShapeError(f"conv3d output would be empty for input {x.shape}")
    return k, out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))


def _unfold_xy(xp: np.ndarray, k: int, d: int, ox: int, oy: int) -> np.ndarray:
    cin, _, _, zp = xp.shape
    cols = np.empty((cin, k, k, ox, oy, zp), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i * d : i * d + ox, j * d : j * d + oy, :]
    return cols


def _unfold_full(xp: np.ndarray, k: int, s: int, d: int, out: tuple[int, int, int]) -> np.ndarray:
    cin = xp.shape[0]
    ox, oy, oz = out
    cols = np.empty((cin, k, k, k, ox, oy, oz), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            for t in range(k):
                cols[:, i, j, t] = xp[
                    :,
                    i * d : i * d + s * (ox - 1) + 1 : s,
                    j * d : j * d + s * (oy - 1) + 1 : s,
                    t * d : t * d + s * (oz - 1) + 1 : s,
                ]
    return cols


def conv3d_forward(x, w, b=None, stride=1, dilation=1, padding=0):
    """Return ``(out, cache)``; ``cache`` feeds :func:`conv3d_backward`."""
    k, (ox, oy, oz) = _validate(x, w, stride, dilation, padding)
    cout, cin = w.shape[:2]
    xp = _pad(x, padding)
    if k == 1 and padding == 0:
        cols = x[:, ::stride, ::stride, ::stride]
        out = np.tensordot(w.reshape(cout, cin), cols, axes=1)
    elif stride == 1:
        cols = _unfold_xy(xp, k, dilation, ox, oy)
        zp = xp.shape[3]
        # wk[t, co, (c, i, j)] = w[co, c, i, j, t]
        wk = np.ascontiguousarray(w.transpose(4, 0, 1, 2, 3)).reshape(k * cout, cin * k * k)
        r = (wk @ cols.reshape(cin * k * k, -1)).reshape(k, cout, ox, oy, zp)
        out = r[0, ..., 0:oz].copy()
        for t in range(1, k):
            out += r[t, ..., t * dilation : t * dilation + oz]
    else:
        cols = _unfold_full(xp, k, stride, dilation, (ox, oy, oz))
        out = (w.reshape(cout, -1) @ cols.reshape(cin * k**3, -1)).reshape(cout, ox, oy, oz)
    if b is not None:
        out += b.reshape(-1, 1, 1, 1)
    cache = (x.shape, xp.shape, cols, k, stride, dilation, padding)
    return out, cache


def conv3d_backward(g, w, cache):
    """Gradients ``(dx, dw, db)`` of a convolution given the output gradient ``g``."""
    xshape, xpshape, cols, k, stride, dilation, padding = cache
    cout, cin = w.shape[:2]
    _, ox, oy, oz = g.shape
    db = g.sum(axis=(1, 2, 3))
    if k == 1 and padding == 0:
        g2 = g.reshape(cout, -1)
        x = np.ascontiguousarray(cols).reshape(cin, -1)
        dw = (g2 @ x.T).reshape(w.shape)
        dsub = (w.reshape(cout, cin).T @ g2).reshape(cin, ox, oy, oz)
        if stride == 1:
            return dsub, dw, db
        dx = np.zeros(xshape, dtype=g.dtype)
        dx[:, ::stride, ::stride, ::stride] = dsub
        return dx, dw, db
    dxp = np.zeros(xpshape, dtype=g.dtype)
    if stride == 1:
        zp = xpshape[3]
        gk = np.zeros((k, cout, ox, oy, zp), dtype=g.dtype)
        for t in range(k):
            gk[t, ..., t * dilation : t * dilation + oz] = g
        gk = gk.reshape(k * cout, -1)
        flat_cols = cols.reshape(cin * k * k, -1)
        dwk = (gk @ flat_cols.T).reshape(k, cout, cin, k, k)
        dw = np.ascontiguousarray(dwk.transpose(1, 2, 3, 4, 0))
        wk = np.ascontiguousarray(w.transpose(4, 0, 1, 2, 3)).reshape(k * cout, cin * k * k)
        dcols = (wk.T @ gk).reshape(cin, k, k, ox, oy, zp)
        d = dilation
        for i in range(k):
            for j in range(k):
                dxp[:, i * d : i * d + ox, j * d : j * d + oy, :] += dcols[:, i, j]
    else:
        g2 = g.reshape(cout, -1)
        dw = (g2 @ cols.reshape(cin * k**3, -1).T).reshape(w.shape)
        dcols = (w.reshape(cout, -1).T @ g2).reshape(cin, k, k, k, ox, oy, oz)
        s, d = stride, dilation
        for i in range(k):
            for j in range(k):
                for t in range(k):
                    dxp[
                        :,
                        i * d : i * d + s * (ox - 1) + 1 : s,
                        j * d : j * d + s * (oy - 1) + 1 : s,
                        t * d : t * d + s * (oz - 1) + 1 : s,
                    ] += dcols[:, i, j, t]
    p = padding
    dx = dxp[:, p : p + xshape[1], p : p + xshape[2], p : p + xshape[3]] if p else dxp
    return np.ascontiguousarray(dx), dw, db


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int | None = None,
) -> Tensor:
    """Zero-padded 3D convolution of a ``(Cin, X, Y, Z)`` tensor.

    ``padding=None`` selects ``dilation * (k - 1) // 2``, which preserves the
    spatial size at stride 1.
    """
    k = weight.shape[2] if weight.ndim == 5 else 0
    if padding is None:
        padding = dilation * (k - 1) // 2
    b = None if bias is None else bias.data
    out, cache = conv3d_forward(x.data, weight.data, b, stride, dilation, padding)
    w = weight.data

    def bw(g):
        dx, dw, db = conv3d_backward(g, w, cache)
        return (dx, dw) if bias is None else (dx, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op("conv3d", inputs, out, bw)


def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    lo = a[np.maximum(np.arange(n) - 1, 0)]
    hi = a[np.minimum(np.arange(n) + 1, n - 1)]
    out = np.empty((2 * n,) + a.shape[1:], dtype=a.dtype)
    out[0::2] = 0.75 * a + 0.25 * lo
    out[1::2] = 0.75 * a + 0.25 * hi
    return np.moveaxis(out, 0, axis)


def _up_axis_t(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, 0)
    n = g.shape[0] // 2
    even, odd = g[0::2], g[1::2]
    out = 0.75 * (even + odd)
    # even outputs pull 0.25 from the left neighbour, odd from the right one
    out[:-1] += 0.25 * even[1:]
    out[0] += 0.25 * even[0]
    out[1:] += 0.25 * odd[:-1]
    out[n - 1] += 0.25 * odd[n - 1]
    return np.moveaxis(out, 0, axis)


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    """Trilinear 2x upsampling of the spatial axes (half-voxel aligned, edge clamped)."""
    for axis in (1, 2, 3):
        x = _up_axis(x, axis)
    return np.ascontiguousarray(x)


def upsample2_backward(g: np.ndarray) -> np.ndarray:
    for axis in (3, 2, 1):
        g = _up_axis_t(g, axis)
    return np.ascontiguousarray(g)


def upsample_trilinear(x: Tensor, factor: int = 2) -> Tensor:
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    if x.ndim != 4:
        raise ShapeError(f"upsample input must be (C, X, Y, Z), got {x.shape}")
    out = upsample2_forward(x.data)
    return apply_op("upsample", (x,), out, lambda g: (upsample2_backward(g),))
