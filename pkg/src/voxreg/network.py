"""Residual U-Net with a parallel dilated-convolution bottleneck.

The network maps the stacked pair ``(f, m)`` to a 3-channel displacement
field in voxel units:

* level 0: residual block ``2 -> c0``;
* levels 1 .. L-2: residual block whose first convolution (and projection
  shortcut) has stride 2;
* level L-1 (bottleneck): stride-2 convolution followed by the dilated block,
  i.e. one 3x3x3 branch per dilation rate, merged (channel concat or sum),
  fused by a 1x1x1 convolution and added back to the block input;
* decoder: trilinear 2x upsampling, 1x1x1 channel reduction, concatenation
  with the encoder skip of the same level and a 3x3x3 convolution;
* refinement residual blocks at full resolution and a final 3-channel
  convolution initialized near zero.

All convolutions are followed by a leaky ReLU except the projection
shortcuts, the fusion convolution (activated after the residual add) and the
final flow layer.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .conv import conv3d, upsample_trilinear
from .tensor import ShapeError, Tensor, add, concat, leaky_relu, no_grad

__all__ = ["ArchConfig", "NetworkParams", "build_network", "forward", "predict", "param_count", "bottleneck_reach"]

MERGE_MODES = ("concat", "sum")


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyper-parameters.

    Widths, block counts and dilation rates are design choices tuned to a
    budget of roughly 0.7-0.85 million parameters at the defaults.
    """

    levels: int = 4
    base_channels: int = 16
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    max_channels: int = 96
    dilation_rates: tuple[int, ...] = (1, 2, 4)
    merge_mode: str = "concat"
    branch_channels: int = 16
    refine_blocks: int = 2
    kernel_size: int = 3
    slope: float = 0.2
    in_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(c) for c in self.channel_multipliers))
        object.__setattr__(self, "dilation_rates", tuple(int(d) for d in self.dilation_rates))
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if len(self.channel_multipliers) < self.levels:
            raise ValueError(f"need {self.levels} channel multipliers, got {self.channel_multipliers}")
        if self.base_channels < 1 or self.max_channels < 1 or self.branch_channels < 1:
            raise ValueError("channel counts must be positive")
        if any(c < 1 for c in self.channel_multipliers):
            raise ValueError("channel multipliers must be positive")
        rates = self.dilation_rates
        if not rates or rates[0] < 1 or any(b < a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"dilation rates must be non-decreasing and >= 1, got {rates}")
        if self.merge_mode not in MERGE_MODES:
            raise ValueError(f"merge_mode must be one of {MERGE_MODES}, got {self.merge_mode!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")
        if self.refine_blocks < 0:
            raise ValueError("refine_blocks must be >= 0")
        if self.slope < 0:
            raise ValueError("slope must be >= 0")

    @property
    def channels(self) -> list[int]:
        return [min(self.base_channels * m, self.max_channels) for m in self.channel_multipliers[: self.levels]]

    @property
    def divisor(self) -> int:
        """Every spatial input dimension must be a multiple of this."""
        return 2 ** (self.levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["dilation_rates"] = list(self.dilation_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class NetworkParams:
    """Ordered, uniquely named learnable tensors plus the architecture they realize."""

    cfg: ArchConfig
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    @property
    def arch_hash(self) -> str:
        return self.cfg.hash()

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def param_count(self) -> int:
        return param_count(self)

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self.tensors.items())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    @classmethod
    def from_arrays(cls, cfg: ArchConfig, arrays) -> "NetworkParams":
        expected = _layer_shapes(cfg)
        names = list(arrays)
        if names != list(expected):
            raise ValueError("parameter names do not match the architecture")
        tensors = OrderedDict()
        for name in names:
            a = np.asarray(arrays[name], dtype=np.float32)
            if a.shape != expected[name]:
                raise ValueError(f"{name}: shape {a.shape} does not match {expected[name]}")
            tensors[name] = Tensor(a.copy(), requires_grad=True, name=name)
        return cls(cfg, tensors)


def param_count(params) -> int:
    """Total number of scalar parameters in ``params`` (NetworkParams or mapping)."""
    items = params.tensors.values() if isinstance(params, NetworkParams) else dict(params).values()
    return int(sum(np.asarray(getattr(t, "data", t)).size for t in items))


def _layer_specs(cfg: ArchConfig):
    """Yield ``(prefix, cin, cout, kernel, init)`` for every convolution, in order."""
    c = cfg.channels
    k = cfg.kernel_size
    L = cfg.levels

    def res(prefix, cin, cout, stride):
        yield f"{prefix}.conv1", cin, cout, k, "he"
        yield f"{prefix}.conv2", cout, cout, k, "he"
        if cin != cout or stride != 1:
            yield f"{prefix}.proj", cin, cout, 1, "he"

    yield from res("enc0", cfg.in_channels, c[0], 1)
    for lvl in range(1, L - 1):
        yield from res(f"enc{lvl}", c[lvl - 1], c[lvl], 2)
    yield "bottleneck.down", c[L - 2], c[L - 1], k, "he"
    for i, _d in enumerate(cfg.dilation_rates):
        yield f"bottleneck.branch{i}", c[L - 1], cfg.branch_channels, k, "he"
    n_merge = cfg.branch_channels * (len(cfg.dilation_rates) if cfg.merge_mode == "concat" else 1)
    yield "bottleneck.fuse", n_merge, c[L - 1], 1, "he"
    for lvl in range(L - 2, -1, -1):
        yield f"dec{lvl}.reduce", c[lvl + 1], c[lvl], 1, "he"
        yield f"dec{lvl}.conv", 2 * c[lvl], c[lvl], k, "he"
    for i in range(cfg.refine_blocks):
        yield from res(f"refine{i}", c[0], c[0], 1)
    yield "flow", c[0], 3, k, "flow"


def _layer_shapes(cfg: ArchConfig) -> "OrderedDict[str, tuple]":
    shapes = OrderedDict()
    for prefix, cin, cout, k, _ in _layer_specs(cfg):
        shapes[f"{prefix}.weight"] = (cout, cin, k, k, k)
        shapes[f"{prefix}.bias"] = (cout,)
    return shapes


def build_network(cfg: ArchConfig | None = None, seed: int = 0) -> NetworkParams:
    """Initialize parameters deterministically from ``seed``.

    Convolutions use He-uniform weights for leaky ReLU and zero biases; the
    flow layer draws weights from N(0, 1e-5^2) so the initial field is close
    to zero.
    """
    cfg = cfg or ArchConfig()
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for prefix, cin, cout, k, init in _layer_specs(cfg):
        shape = (cout, cin, k, k, k)
        if init == "flow":
            w = rng.normal(0.0, 1e-5, size=shape)
        else:
            fan_in = cin * k**3
            bound = np.sqrt(6.0 / ((1.0 + cfg.slope**2) * fan_in))
            w = rng.uniform(-bound, bound, size=shape)
        tensors[f"{prefix}.weight"] = Tensor(w.astype(np.float32), requires_grad=True, name=f"{prefix}.weight")
        tensors[f"{prefix}.bias"] = Tensor(np.zeros(cout, np.float32), requires_grad=True, name=f"{prefix}.bias")
    return NetworkParams(cfg, tensors)


class _Runner:
    def __init__(self, params: NetworkParams):
        self.p = params.tensors
        self.cfg = params.cfg

    def conv(self, name, x, stride=1, dilation=1):
        w = self.p[f"{name}.weight"]
        return conv3d(x, w, self.p[f"{name}.bias"], stride=stride, dilation=dilation)

    def act(self, x):
        return leaky_relu(x, self.cfg.slope)

    def res(self, name, x, stride=1):
        y = self.act(self.conv(f"{name}.conv1", x, stride=stride))
        y = self.conv(f"{name}.conv2", y)
        short = self.conv(f"{name}.proj", x, stride=stride) if f"{name}.proj.weight" in self.p else x
        return self.act(add(y, short))

    def bottleneck(self, x):
        h = self.act(self.conv("bottleneck.down", x, stride=2))
        branches = [
            self.act(self.conv(f"bottleneck.branch{i}", h, dilation=d))
            for i, d in enumerate(self.cfg.dilation_rates)
        ]
        if self.cfg.merge_mode == "concat":
            merged = concat(branches, axis=0)
        else:
            merged = branches[0]
            for b in branches[1:]:
                merged = add(merged, b)
        return self.act(add(h, self.conv("bottleneck.fuse", merged)))


def _check_inputs(cfg: ArchConfig, f: np.ndarray, m: np.ndarray):
    if f.shape != m.shape:
        raise ShapeError(f"fixed and moving dims differ: {f.shape} vs {m.shape}")
    if f.ndim != 3:
        raise ShapeError(f"volumes must be 3D, got {f.shape}")
    if any(n % cfg.divisor for n in f.shape):
        raise ShapeError(f"dims {f.shape} must be divisible by {cfg.divisor} for {cfg.levels} levels")


def forward(params: NetworkParams, f, m, capture: dict | None = None) -> Tensor:
    """Predict the displacement field ``(3, X, Y, Z)`` for fixed ``f`` and moving ``m``.

    Gradients flow to the parameters when recording is enabled.  If
    ``capture`` is a dict, the bottleneck output is stored under
    ``"bottleneck"``.
    """
    fa = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float32)
    ma = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float32)
    _check_inputs(params.cfg, fa, ma)
    dtype = params.tensors["flow.weight"].dtype
    x = Tensor(np.stack([fa, ma]).astype(dtype, copy=False))
    run = _Runner(params)
    L = params.cfg.levels

    skips = [run.res("enc0", x)]
    for lvl in range(1, L - 1):
        skips.append(run.res(f"enc{lvl}", skips[-1], stride=2))
    h = run.bottleneck(skips[-1])
    if capture is not None:
        capture["bottleneck"] = h
    for lvl in range(L - 2, -1, -1):
        h = run.act(run.conv(f"dec{lvl}.reduce", upsample_trilinear(h)))
        h = run.act(run.conv(f"dec{lvl}.conv", concat([h, skips[lvl]], axis=0)))
    for i in range(params.cfg.refine_blocks):
        h = run.res(f"refine{i}", h)
    return run.conv("flow", h)


def predict(params: NetworkParams, f, m) -> np.ndarray:
    """Inference-only forward pass returning a plain array."""
    with no_grad():
        return forward(params, f, m).data


def bottleneck_reach(params: NetworkParams, dims, voxel, seed: int = 0) -> int:
    """Farthest distance (in input voxels, max-norm) at which a single-voxel
    change of the fixed image alters the bottleneck activations.

    Bottleneck cell ``b`` is centred on input voxel ``b * divisor``.  Returns
    -1 if nothing changes.
    """
    rng = np.random.default_rng(seed)
    dtype = params.tensors["flow.weight"].dtype
    f = rng.standard_normal(tuple(dims)).astype(dtype)
    m = rng.standard_normal(tuple(dims)).astype(dtype)
    outs = []
    for delta in (0.0, 1.0):
        fp = f.copy()
        fp[tuple(voxel)] += delta
        cap: dict = {}
        with no_grad():
            forward(params, fp, m, capture=cap)
        outs.append(cap["bottleneck"].data)
    changed = np.argwhere(np.any(outs[0] != outs[1], axis=0))
    if changed.size == 0:
        return -1
    return int(np.abs(changed * params.cfg.divisor - np.asarray(voxel)).max())
