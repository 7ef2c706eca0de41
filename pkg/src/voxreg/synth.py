"""Synthetic phantoms and smooth ground-truth deformations.

A phantom is a sum of small isotropic Gaussian blobs on a faint smoothed
noise texture, scaled to [0, 1].  Its label map assigns each voxel to the
blob that dominates it, with background where no blob reaches
``label_level`` of its peak.  The texture gives the similarity metric
something to lock onto between structures.  Deformations are white noise smoothed by
a Gaussian filter and rescaled so the largest displacement vector has length
``amplitude``.

``make_pair`` returns ``m(p) = f(p + u_true(p))``: ``u_true`` is a pull-back
field, and the field that registers ``m`` back onto ``f`` is its inverse.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .metrics import jacobian_fnj
from .warp import sample_trilinear, warp_nearest

__all__ = ["SynthSpec", "RECOVERY_SPEC", "SynthPair", "make_phantom", "make_smooth_field", "make_pair", "make_dataset"]


@dataclass(frozen=True)
class SynthSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    blobs: int = 12
    amplitude: float = 3.0
    sigma: float = 8.0
    seed: int = 0
    # None selects (size / 12, size / 7) with size the smallest dimension
    blob_width: tuple[float, float] | None = None
    label_level: float = 0.5
    texture: float = 0.0
    texture_sigma: float = 1.5
    # a field is only required to fit the network when it is used for training
    divisor: int = 1

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if any(d % self.divisor for d in dims):
            raise ValueError(f"dims {dims} must be divisible by {self.divisor}")
        if self.blobs < 0:
            raise ValueError("blobs must be >= 0")
        if self.amplitude < 0:
            raise ValueError("amplitude must be >= 0")
        if self.sigma <= 0:
            raise ValueError("sigma must be > 0")
        lo, hi = self.widths
        if not 0 < lo <= hi:
            raise ValueError(f"blob_width must satisfy 0 < lo <= hi, got {self.blob_width}")
        if not 0 < self.label_level < 1:
            raise ValueError("label_level must lie in (0, 1)")
        if self.texture < 0 or self.texture_sigma <= 0:
            raise ValueError("texture must be >= 0 and texture_sigma > 0")


    @property
    def widths(self) -> tuple[float, float]:
        if self.blob_width is not None:
            return tuple(float(w) for w in self.blob_width)
        size = min(self.dims)
        return size / 12, size / 7


# Many small structures on a textured background: unregistered label overlap
# is low enough that alignment shows up clearly in Dice, and the similarity
# metric has contrast everywhere rather than only near the blobs.
RECOVERY_SPEC = SynthSpec(blobs=60, blob_width=(2.0, 3.5), label_level=0.7, texture=0.15)


@dataclass
class SynthPair:
    fixed: np.ndarray
    moving: np.ndarray
    u_true: np.ndarray
    labels_fixed: np.ndarray
    labels_moving: np.ndarray


def make_phantom(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray]:
    """Blob phantom in [0, 1] (float32) and its uint16 label map."""
    rng = np.random.default_rng([spec.seed, 0])
    dims = spec.dims
    vol = np.zeros(dims, dtype=np.float64)
    labels = np.zeros(dims, dtype=np.uint16)
    if spec.blobs == 0 and spec.texture == 0:
        return vol.astype(np.float32), labels
    grid = np.indices(dims, dtype=np.float64)
    best = np.full(dims, spec.label_level)
    for k in range(spec.blobs):
        center = np.array([rng.uniform(0.1 * n, 0.9 * n) for n in dims])
        width = rng.uniform(*spec.widths)
        weight = rng.uniform(0.4, 1.0)
        r2 = sum((grid[d] - center[d]) ** 2 for d in range(3))
        g = np.exp(-0.5 * r2 / width**2)
        vol += weight * g
        wins = g > best
        labels[wins] = k + 1
        best = np.where(wins, g, best)
    if spec.texture > 0:
        noise = gaussian_filter(rng.standard_normal(dims), spec.texture_sigma, mode="reflect")
        vol += spec.texture * noise / max(noise.std(), 1e-12)
    vol -= vol.min()
    if vol.max() > 0:
        vol /= vol.max()
    return vol.astype(np.float32), labels


def make_smooth_field(spec: SynthSpec, max_tries: int = 10) -> np.ndarray:
    """Smooth random displacement (3, X, Y, Z) with max vector length ``amplitude``.

    If the field folds anywhere the amplitude is reduced by 0.8 and the check
    repeated; after ``max_tries`` failures a RuntimeError is raised.
    """
    dims = spec.dims
    if spec.amplitude == 0:
        return np.zeros((3,) + dims, dtype=np.float32)
    rng = np.random.default_rng([spec.seed, 1])
    noise = rng.standard_normal((3,) + dims)
    field = np.stack([gaussian_filter(noise[d], spec.sigma, mode="reflect") for d in range(3)])
    field /= np.sqrt((field**2).sum(axis=0)).max()
    amp = spec.amplitude
    for _ in range(max_tries):
        u = field * amp
        if min(dims) < 3 or jacobian_fnj(u)[0] == 0:
            return u.astype(np.float32)
        amp *= 0.8
    raise RuntimeError(f"could not generate a fold-free field in {max_tries} tries")


def make_pair(spec: SynthSpec) -> SynthPair:
    """Fixed phantom, its deformed copy and the ground-truth pull-back field."""
    f, labels_f = make_phantom(spec)
    u = make_smooth_field(spec)
    m = sample_trilinear(f.astype(np.float64), u.astype(np.float64)).astype(np.float32)
    labels_m = warp_nearest(labels_f, u)
    return SynthPair(f, m, u, labels_f, labels_m)


def make_dataset(spec: SynthSpec, count: int) -> list[SynthPair]:
    """``count`` independent pairs with seeds ``spec.seed, spec.seed + 1, ...``."""
    return [make_pair(replace(spec, seed=spec.seed + i)) for i in range(count)]
