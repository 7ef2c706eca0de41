import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_conv3d(x, w, b=None, stride=1, dilation=1, padding=0):
    """Direct seven-loop cross-correlation, the reference for the fast kernels."""
    cin, X, Y, Z = x.shape
    cout, _, k, _, _ = w.shape
    xp = np.pad(x, ((0, 0),) + ((padding, padding),) * 3)
    ox = (X + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    oy = (Y + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    oz = (Z + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((cout, ox, oy, oz))
    for co in range(cout):
        for i in range(ox):
            for j in range(oy):
                for l in range(oz):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(cin):
                        for a in range(k):
                            for c in range(k):
                                for e in range(k):
                                    acc += w[co, ci, a, c, e] * xp[
                                        ci,
                                        i * stride + a * dilation,
                                        j * stride + c * dilation,
                                        l * stride + e * dilation,
                                    ]
                    out[co, i, j, l] = acc
    return out


def brute_lncc(f, w, r, eps):
    """Squared local correlation summed over voxels, windows clipped to the domain."""
    f = np.asarray(f, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    total = 0.0
    X, Y, Z = f.shape
    for x in range(X):
        for y in range(Y):
            for z in range(Z):
                sl = (
                    slice(max(x - r, 0), x + r + 1),
                    slice(max(y - r, 0), y + r + 1),
                    slice(max(z - r, 0), z + r + 1),
                )
                a = f[sl] - f[sl].mean()
                c = w[sl] - w[sl].mean()
                total += np.sum(a * c) ** 2 / (np.sum(a * a) * np.sum(c * c) + eps)
    return total


def brute_sobolev(u):
    """Forward differences with a replicated last sample (the boundary difference is zero)."""
    u = np.asarray(u, dtype=np.float64)
    _, X, Y, Z = u.shape
    total = 0.0
    for i in range(3):
        for x in range(X):
            for y in range(Y):
                for z in range(Z):
                    v = u[i, x, y, z]
                    total += (u[i, min(x + 1, X - 1), y, z] - v) ** 2
                    total += (u[i, x, min(y + 1, Y - 1), z] - v) ** 2
                    total += (u[i, x, y, min(z + 1, Z - 1)] - v) ** 2
    return total
