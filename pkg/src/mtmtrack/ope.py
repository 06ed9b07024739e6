"""One-pass evaluation: Success (IoU sweep) and Precision (centre-distance sweep) AUCs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import OrientedBox3D, center_distance, iou3d

IOU_THRESHOLDS = np.linspace(0.0, 1.0, 21)
DIST_THRESHOLDS = np.linspace(0.0, 2.0, 21)


@dataclass
class OpeResult:
    success: float
    precision: float
    ious: list[float] = field(default_factory=list)
    errors: list[float] = field(default_factory=list)

    def curves(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {
            "success": (IOU_THRESHOLDS, success_curve(self.ious)),
            "precision": (DIST_THRESHOLDS, precision_curve(self.errors)),
        }


def success_curve(ious) -> np.ndarray:
    """Fraction of frames with IoU strictly above each threshold."""
    v = np.asarray(ious, dtype=np.float64)
    if v.size == 0:
        return np.zeros_like(IOU_THRESHOLDS)
    return (v[None, :] > IOU_THRESHOLDS[:, None]).mean(axis=1)


def precision_curve(errors) -> np.ndarray:
    """Fraction of frames with centre error strictly below each distance."""
    v = np.asarray(errors, dtype=np.float64)
    if v.size == 0:
        return np.zeros_like(DIST_THRESHOLDS)
    return (v[None, :] < DIST_THRESHOLDS[:, None]).mean(axis=1)


def auc(thresholds: np.ndarray, curve: np.ndarray) -> float:
    """Trapezoidal area under ``curve``, normalised by the threshold span and scaled to 0..100."""
    span = thresholds[-1] - thresholds[0]
    return float(np.trapezoid(curve, thresholds) / span * 100.0)


def evaluate_ope(pred: Sequence[OrientedBox3D], gt: Sequence[OrientedBox3D]) -> OpeResult:
    if len(pred) != len(gt):
        raise ValueError(f"evaluate_ope: {len(pred)} predictions for {len(gt)} ground-truth boxes")
    ious = [iou3d(p, g) for p, g in zip(pred, gt)]
    errors = [center_distance(p, g) for p, g in zip(pred, gt)]
    return OpeResult(
        success=auc(IOU_THRESHOLDS, success_curve(ious)),
        precision=auc(DIST_THRESHOLDS, precision_curve(errors)),
        ious=ious,
        errors=errors,
    )


def mean_result(results: Sequence[OpeResult]) -> tuple[float, float]:
    """Frame-weighted mean Success and Precision over several tracklets."""
    ious = [v for r in results for v in r.ious]
    errs = [v for r in results for v in r.errors]
    return auc(IOU_THRESHOLDS, success_curve(ious)), auc(DIST_THRESHOLDS, precision_curve(errs))
