"""Unoriented angular-error metrics: mean, rmse and PGP(alpha)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch


@dataclass
class EvalReport:
    mean_deg: float
    rmse_deg: float
    pgp: dict[float, float]
    per_point_errors_deg: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "mean_deg": self.mean_deg,
            "rmse_deg": self.rmse_deg,
            "pgp": {f"{a:g}": v for a, v in sorted(self.pgp.items())},
            "count": None if self.per_point_errors_deg is None else int(len(self.per_point_errors_deg)),
        }


def angular_error(pred, gt) -> np.ndarray | float:
    """Angle in degrees between unoriented normals, in [0, 90].

    Works on single vectors or (N, 3) arrays.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    dot = np.abs(np.sum(pred * gt, axis=-1))
    err = np.degrees(np.arccos(np.clip(dot, 0.0, 1.0)))
    return float(err) if err.ndim == 0 else err


def evaluate(pred, gt, alphas=(5.0, 10.0), keep_errors: bool = True) -> EvalReport:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predicted normals vs {len(gt)} ground-truth normals")
    if len(pred) == 0:
        raise LengthMismatch("cannot evaluate an empty normal field")
    return summarize_errors(angular_error(pred, gt), alphas, keep_errors)


def summarize_errors(errors_deg, alphas=(5.0, 10.0), keep_errors: bool = True) -> EvalReport:
    """Reduce per-point angular errors (degrees) to an EvalReport.

    PGP counts errors strictly below each threshold.
    """
    err = np.asarray(errors_deg, dtype=np.float64).ravel()
    pgp = {float(a): float(np.mean(err < a)) for a in alphas}
    return EvalReport(float(np.mean(err)), float(np.sqrt(np.mean(err ** 2))), pgp,
                      err if keep_errors else None)
