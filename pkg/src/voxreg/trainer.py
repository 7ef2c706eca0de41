"""Unsupervised training loop, Adam optimizer and inference helper."""

from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .io import Checkpoint
from .loss import LossConfig, total_loss
from .network import ArchConfig, NetworkParams, build_network, forward, predict
from .tensor import ShapeError, Tensor, recording
from .warp import sample_trilinear

__all__ = [
    "NumericError",
    "TrainConfig",
    "AdamState",
    "LogRow",
    "TrainResult",
    "adam_step",
    "train",
    "register",
    "write_log_csv",
    "to_checkpoint",
    "from_checkpoint",
]

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    """A gradient or parameter became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    max_steps: int | None = None
    batch_size: int = 1
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    checkpoint_every: int = 0
    sampling: str = "pairs"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.sampling not in ("pairs", "random"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    t: int = 0


def adam_step(params, grads, state: AdamState, cfg: TrainConfig) -> tuple[dict, AdamState]:
    """Apply one bias-corrected Adam update in place.

    ``params`` maps names to arrays (or tensors); ``grads`` maps the same
    names to arrays.  Raises :class:`NumericError` naming the first tensor
    with a non-finite gradient, before anything is modified.
    """
    items = params.tensors if isinstance(params, NetworkParams) else params
    for name, g in grads.items():
        if name not in items:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        p = items[name]
        if np.shape(g) != np.shape(getattr(p, "data", p)):
            raise ShapeError(f"{name}: gradient shape {np.shape(g)} vs parameter {np.shape(p)}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    step = cfg.lr * np.sqrt(1 - b2**t) / (1 - b1**t)
    for name, g in grads.items():
        p = items[name]
        data = p.data if isinstance(p, Tensor) else p
        if name not in state.m:
            state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        # eps is scaled so this equals lr * mhat / (sqrt(vhat) + eps)
        data -= (step * m / (np.sqrt(v) + cfg.adam_eps * np.sqrt(1 - b2**t))).astype(data.dtype)
    return params, state


@dataclass
class LogRow:
    step: int
    lncc_term: float
    reg_term: float
    total: float


@dataclass
class TrainResult:
    params: NetworkParams
    log: list[LogRow]
    state: AdamState
    config: TrainConfig


def write_log_csv(rows: Sequence[LogRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lncc_term", "reg_term", "total"])
        for r in rows:
            w.writerow([r.step, repr(r.lncc_term), repr(r.reg_term), repr(r.total)])


def _as_pair(item):
    if hasattr(item, "fixed"):
        return item.fixed, item.moving
    return item[0], item[1]


def _validate_pairs(pairs, arch: ArchConfig):
    if len(pairs) == 0:
        raise ValueError("training set is empty")
    dims = None
    out = []
    for i, item in enumerate(pairs):
        f, m = (np.asarray(a, dtype=np.float32) for a in _as_pair(item))
        if f.shape != m.shape:
            raise ShapeError(f"pair {i}: fixed {f.shape} and moving {m.shape} differ")
        if dims is None:
            dims = f.shape
        elif f.shape != dims:
            raise ShapeError(f"pair {i}: dims {f.shape} differ from {dims}")
        if f.ndim != 3 or any(n % arch.divisor for n in f.shape):
            raise ShapeError(f"dims {f.shape} must be 3D and divisible by {arch.divisor}")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(m))):
            raise NumericError(f"pair {i} contains non-finite values")
        out.append((f, m))
    return out


def train(
    pairs,
    cfg: TrainConfig | None = None,
    arch: ArchConfig | None = None,
    params: NetworkParams | None = None,
    state: AdamState | None = None,
    callback=None,
) -> TrainResult:
    """Fit the network to ``pairs`` by minimizing the unsupervised loss.

    Each epoch visits the pairs in a seeded shuffled order (``sampling =
    "pairs"``) or draws them with replacement (``"random"``).  A step
    averages the gradients of ``batch_size`` pairs.  ``callback(step,
    params, row)`` is called after every step, e.g. for checkpointing.
    """
    cfg = cfg or TrainConfig()
    arch = arch or (params.cfg if params is not None else ArchConfig())
    data = _validate_pairs(pairs, arch)
    params = params or build_network(arch, cfg.seed)
    state = state or AdamState()
    rng = np.random.default_rng([cfg.seed, 7])
    rows: list[LogRow] = []
    step = state.t
    for _epoch in range(cfg.epochs):
        if cfg.sampling == "pairs":
            order = rng.permutation(len(data))
        else:
            order = rng.integers(0, len(data), size=len(data))
        batches = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        for batch in batches:
            if cfg.max_steps is not None and step >= cfg.max_steps:
                return TrainResult(params, rows, state, cfg)
            params.zero_grad()
            terms = np.zeros(3)
            for idx in batch:
                f, m = data[idx]
                with recording() as tape:
                    u = forward(params, f, m)
                    lt = total_loss(f, m, u, cfg.loss)
                    tape.backward(lt.total)
                terms += (lt.lncc_term, lt.reg_term, lt.total.item())
            scale = 1.0 / len(batch)
            grads = OrderedDict()
            for name, t in params:
                g = t.grad if t.grad is not None else np.zeros_like(t.data)
                grads[name] = g * np.float32(scale) if len(batch) > 1 else g
            adam_step(params, grads, state, cfg)
            for name, t in params:
                if not np.all(np.isfinite(t.data)):
                    raise NumericError(f"parameter {name!r} became non-finite at step {state.t}")
            step = state.t
            terms *= scale
            row = LogRow(step, float(terms[0]), float(terms[1]), float(terms[2]))
            rows.append(row)
            if step % 50 == 0 or step == 1:
                log.info("step %d total %.6f lncc %.6f reg %.6f", step, row.total, row.lncc_term, row.reg_term)
            if callback is not None:
                callback(step, params, row)
    return TrainResult(params, rows, state, cfg)


def register(params: NetworkParams, f, m) -> tuple[np.ndarray, np.ndarray]:
    """One network application: displacement ``u`` and the warped moving image."""
    f = np.asarray(f, dtype=np.float32)
    m = np.asarray(m, dtype=np.float32)
    u = predict(params, f, m)
    return u, sample_trilinear(m, u)


def to_checkpoint(params: NetworkParams, state: AdamState | None = None, extra: dict | None = None) -> Checkpoint:
    """Bundle parameters (and optionally the Adam moments) for :func:`voxreg.io.save_checkpoint`."""
    config = {"arch": params.cfg.to_dict(), "arch_hash": params.arch_hash}
    if extra:
        config.update(extra)
    optim = None
    if state is not None:
        optim = OrderedDict()
        for name, a in state.m.items():
            optim["m/" + name] = a
        for name, a in state.v.items():
            optim["v/" + name] = a
    return Checkpoint(config, params.arrays(), optim, step=state.t if state else 0)


def from_checkpoint(ckpt: Checkpoint) -> tuple[NetworkParams, AdamState | None]:
    """Rebuild parameters and optimizer state; the stored hash must match the stored architecture."""
    arch = ArchConfig.from_dict(ckpt.config["arch"])
    if ckpt.arch_hash != arch.hash():
        raise ValueError(f"checkpoint hash {ckpt.arch_hash} does not match its architecture {arch.hash()}")
    params = NetworkParams.from_arrays(arch, ckpt.tensors)
    state = None
    if ckpt.optimizer is not None:
        state = AdamState(t=ckpt.step)
        for key, a in ckpt.optimizer.items():
            kind, name = key.split("/", 1)
            (state.m if kind == "m" else state.v)[name] = a.copy()
    return params, state
