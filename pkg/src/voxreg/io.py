"""Raw volume files with JSON sidecars, and binary model checkpoints.

Volume files
    ``<name>.raw`` holds little-endian values with x varying fastest, then y,
    then z: voxel ``(x, y, z)`` sits at flat index ``x + nx * (y + ny * z)``.
    ``<name>.json`` is ``{"dims": [nx, ny, nz], "dtype": "f32" | "u16",
    "kind": "volume" | "labels" | "field"}``.  A field stores the full ux
    block, then uy, then uz.

Checkpoints
    ``b"VXRG"``, u32 format version, u32 length + UTF-8 JSON config, u32
    record count, then per record: u16 name length + UTF-8 name, u8 rank,
    u32 dims, little-endian f32 data in C order.

In memory, volumes are ``(nx, ny, nz)`` arrays and fields ``(3, nx, ny, nz)``.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "VolumeIOError",
    "Checkpoint",
    "load_volume",
    "save_volume",
    "load_labels",
    "save_labels",
    "load_field",
    "save_field",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

MAGIC = b"VXRG"
CHECKPOINT_VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


class VolumeIOError(IOError):
    """Malformed, missing or inconsistent volume / checkpoint file."""


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".raw", ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".raw"), p.with_name(p.name + ".json")


def _read(path, kind: str, dtype: str, normalize: bool = False) -> np.ndarray:
    raw, meta = _paths(path)
    if not meta.exists():
        raise VolumeIOError(f"missing header {meta}")
    if not raw.exists():
        raise VolumeIOError(f"missing payload {raw}")
    try:
        header = json.loads(meta.read_text())
        dims = tuple(int(d) for d in header["dims"])
        file_dtype, file_kind = header["dtype"], header["kind"]
    except (ValueError, KeyError, TypeError) as exc:
        raise VolumeIOError(f"bad header {meta}: {exc}") from exc
    if file_kind != kind:
        raise VolumeIOError(f"{meta}: expected kind {kind!r}, found {file_kind!r}")
    if file_dtype != dtype:
        raise VolumeIOError(f"{meta}: expected dtype {dtype!r}, found {file_dtype!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise VolumeIOError(f"{meta}: invalid dims {dims}")
    comps = 3 if kind == "field" else 1
    npdt = _DTYPES[dtype]
    count = comps * int(np.prod(dims))
    payload = raw.read_bytes()
    if len(payload) != count * npdt.itemsize:
        raise VolumeIOError(
            f"size mismatch: {raw} has {len(payload)} bytes, header implies {count * npdt.itemsize}"
        )
    flat = np.frombuffer(payload, dtype=npdt)
    if npdt.kind == "f":
        bad = np.flatnonzero(~np.isfinite(flat))
        if bad.size:
            raise VolumeIOError(f"non-finite value in {raw} at flat index {int(bad[0])}")
    if comps == 1:
        arr = flat.reshape(dims, order="F")
    else:
        arr = np.stack([blk.reshape(dims, order="F") for blk in flat.reshape(3, -1)])
    arr = arr.astype(npdt.newbyteorder("="))
    if normalize:
        lo, hi = float(arr.min()), float(arr.max())
        arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    return np.ascontiguousarray(arr)


def _write(arr: np.ndarray, path, kind: str, dtype: str) -> None:
    raw, meta = _paths(path)
    npdt = _DTYPES[dtype]
    if kind == "field":
        dims = arr.shape[1:]
        flat = np.concatenate([arr[d].ravel(order="F") for d in range(3)])
    else:
        dims = arr.shape
        flat = arr.ravel(order="F")
    header = {"dims": [int(d) for d in dims], "dtype": dtype, "kind": kind}
    try:
        raw.write_bytes(flat.astype(npdt).tobytes())
        meta.write_text(json.dumps(header))
    except OSError as exc:
        raise VolumeIOError(f"cannot write {raw}: {exc}") from exc


def load_volume(path, normalize: bool = False) -> np.ndarray:
    """Scalar volume as a float32 ``(nx, ny, nz)`` array, optionally min-max scaled to [0, 1]."""
    return _read(path, "volume", "f32", normalize)


def save_volume(v: np.ndarray, path) -> None:
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError(f"volume must be 3D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("volume contains non-finite values")
    _write(v, path, "volume", "f32")


def load_labels(path) -> np.ndarray:
    return _read(path, "labels", "u16")


def save_labels(labels: np.ndarray, path) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 3:
        raise ValueError(f"label volume must be 3D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max):
        raise ValueError("labels must fit in 16 unsigned bits")
    _write(labels, path, "labels", "u16")


def load_field(path) -> np.ndarray:
    """Displacement field as a float32 ``(3, nx, ny, nz)`` array."""
    return _read(path, "field", "f32")


def save_field(u: np.ndarray, path) -> None:
    u = np.asarray(u)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ValueError(f"field must be (3, nx, ny, nz), got {u.shape}")
    if not np.all(np.isfinite(u)):
        raise ValueError("field contains non-finite values")
    _write(u, path, "field", "f32")


@dataclass
class Checkpoint:
    """Named parameter tensors plus the configuration that produced them."""

    config: dict
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    optimizer: "OrderedDict[str, np.ndarray] | None" = None
    step: int = 0
    version: int = CHECKPOINT_VERSION

    @property
    def arch_hash(self) -> str | None:
        return self.config.get("arch_hash")


def _record(name: str, a: np.ndarray) -> bytes:
    nb = name.encode()
    a = np.ascontiguousarray(a, dtype="<f4")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    config = dict(ckpt.config)
    config["step"] = int(ckpt.step)
    config["has_optimizer"] = ckpt.optimizer is not None
    blob = json.dumps(config, sort_keys=True).encode()
    records = [_record(n, a) for n, a in ckpt.tensors.items()]
    for n, a in (ckpt.optimizer or {}).items():
        records.append(_record("optim/" + n, a))
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC + struct.pack("<II", ckpt.version, len(blob)) + blob)
            fh.write(struct.pack("<I", len(records)))
            for r in records:
                fh.write(r)
    except OSError as exc:
        raise VolumeIOError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise VolumeIOError(f"truncated checkpoint {self.path}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected_arch_hash: str | None = None) -> Checkpoint:
    """Read a checkpoint; reject unknown versions and architecture mismatches."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise VolumeIOError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise VolumeIOError(f"{path} is not a checkpoint (bad magic)")
    version, nblob = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise VolumeIOError(f"unsupported checkpoint version {version}")
    config = json.loads(r.take(nblob).decode())
    if expected_arch_hash is not None and config.get("arch_hash") != expected_arch_hash:
        raise VolumeIOError(
            f"architecture mismatch: checkpoint {config.get('arch_hash')} vs expected {expected_arch_hash}"
        )
    (count,) = r.unpack("<I")
    tensors, optim = OrderedDict(), OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        if name.startswith("optim/"):
            optim[name[len("optim/") :]] = a
        else:
            tensors[name] = a
    if r.pos != len(buf):
        raise VolumeIOError(f"trailing bytes in checkpoint {path}")
    step = int(config.pop("step", 0))
    has_opt = config.pop("has_optimizer", False)
    return Checkpoint(config, tensors, optim if has_opt else None, step, version)
