"""Evaluation metrics: label overlap, folding and displacement magnitude."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import ShapeError

__all__ = [
    "MetricsReport",
    "dice",
    "jacobian_determinant",
    "jacobian_fnj",
    "displacement_stats",
    "evaluate_field",
]


def _labels_of(*vols) -> list[int]:
    present = set()
    for v in vols:
        present.update(int(x) for x in np.unique(v))
    present.discard(0)
    return sorted(present)


def dice(a: np.ndarray, b: np.ndarray, labels=None) -> tuple[dict[int, float | None], float]:
    """Per-label Dice ``2|A∩B| / (|A|+|B|)`` and their mean.

    Labels absent from both volumes map to ``None`` and are left out of the
    mean.  ``labels=None`` uses every non-zero label present in either volume.
    """
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"dice: dims mismatch {a.shape} vs {b.shape}")
    labels = _labels_of(a, b) if labels is None else sorted(int(x) for x in labels)
    if not labels:
        raise ValueError("dice: empty label set")
    per: dict[int, float | None] = {}
    for lab in labels:
        ma, mb = a == lab, b == lab
        denom = int(ma.sum()) + int(mb.sum())
        per[lab] = None if denom == 0 else 2.0 * int(np.logical_and(ma, mb).sum()) / denom
    scored = [v for v in per.values() if v is not None]
    mean = float(np.mean(scored)) if scored else float("nan")
    return per, mean


def jacobian_determinant(u: np.ndarray) -> np.ndarray:
    """det(I + grad u) on interior voxels, via central differences.

    Returns an array of shape ``(X-2, Y-2, Z-2)``.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ShapeError(f"displacement field must be (3, X, Y, Z), got {u.shape}")
    if min(u.shape[1:]) < 3:
        raise ShapeError(f"volume too small for central differences: {u.shape[1:]}")
    # grad[i][j] = d u_i / d x_j
    grad = [[None] * 3 for _ in range(3)]
    for j in range(3):
        fwd = [slice(1, -1)] * 3
        bwd = [slice(1, -1)] * 3
        fwd[j], bwd[j] = slice(2, None), slice(None, -2)
        for i in range(3):
            grad[i][j] = 0.5 * (u[i][tuple(fwd)] - u[i][tuple(bwd)])
    J = [[grad[i][j] + (1.0 if i == j else 0.0) for j in range(3)] for i in range(3)]
    det = (
        J[0][0] * (J[1][1] * J[2][2] - J[1][2] * J[2][1])
        - J[0][1] * (J[1][0] * J[2][2] - J[1][2] * J[2][0])
        + J[0][2] * (J[1][0] * J[2][1] - J[1][1] * J[2][0])
    )
    return det


def jacobian_fnj(u: np.ndarray) -> tuple[float, np.ndarray]:
    """Fraction of interior voxels with non-positive Jacobian determinant."""
    det = jacobian_determinant(u)
    return float(np.count_nonzero(det <= 0)) / det.size, det


def displacement_stats(u: np.ndarray) -> tuple[float, float, float]:
    """Mean absolute displacement along x, y and z, in voxels."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ShapeError(f"displacement field must be (3, X, Y, Z), got {u.shape}")
    return tuple(float(np.mean(np.abs(u[d]))) for d in range(3))


@dataclass
class MetricsReport:
    dice: dict[int, float | None] = field(default_factory=dict)
    mean_dice: float | None = None
    fnj: float = 0.0
    mean_abs_u: tuple[float, float, float] = (0.0, 0.0, 0.0)
    voxels: int = 0
    losses: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dice"] = {str(k): v for k, v in self.dice.items()}
        d["mean_abs_u"] = list(self.mean_abs_u)
        return d

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    def to_csv_row(self) -> str:
        """One header line plus one value row, for assembling result tables."""
        cols = ["mean_dice", "fnj", "mean_abs_ux", "mean_abs_uy", "mean_abs_uz", "voxels"]
        vals = [self.mean_dice, self.fnj, *self.mean_abs_u, self.voxels]
        cols += sorted(self.losses)
        vals += [self.losses[k] for k in sorted(self.losses)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        w.writerow(["" if v is None else v for v in vals])
        return buf.getvalue()

    def dice_csv(self) -> str:
        """Per-structure Dice table (``label,dice``); absent labels are left blank."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "dice"])
        for lab, v in sorted(self.dice.items()):
            w.writerow([lab, "" if v is None else v])
        return buf.getvalue()


def evaluate_field(u, warped_labels=None, fixed_labels=None, labels=None) -> MetricsReport:
    """Assemble a report for one displacement field and (optionally) label maps."""
    u = np.asarray(u)
    fnj, _ = jacobian_fnj(u)
    report = MetricsReport(fnj=fnj, mean_abs_u=displacement_stats(u), voxels=int(np.prod(u.shape[1:])))
    if warped_labels is not None and fixed_labels is not None:
        report.dice, report.mean_dice = dice(warped_labels, fixed_labels, labels)
    return report
