"""Segmentation evaluation: confusion counts, overlap/rate metrics, average
Hausdorff distance, and the parameter-efficiency score.

Metrics with a zero denominator are reported as undefined (None) rather than
silently coerced -- specificity and accuracy saturate near 1 on sparse
vasculature, so silent defaults would be misleading.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ParameterError, ShapeError, UndefinedMetricError
from .volume import BinaryMask


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred: BinaryMask, gt: BinaryMask) -> ConfusionCounts:
    """Voxelwise confusion counts of a predicted mask against ground truth."""
    if pred.dims != gt.dims:
        raise ShapeError(f"pred dims {pred.dims} != gt dims {gt.dims}")
    code = 2 * gt.data.astype(np.int64) + pred.data.astype(np.int64)
    c = np.bincount(code, minlength=4)
    return ConfusionCounts(tp=int(c[3]), fp=int(c[1]), tn=int(c[0]), fn=int(c[2]))


@dataclass(frozen=True)
class RateMetrics:
    """Rate metrics from confusion counts; None marks an undefined value."""

    accuracy: float | None
    dsc: float | None
    sensitivity: float | None
    specificity: float | None
    precision: float | None


def rate_metrics(c: ConfusionCounts) -> RateMetrics:
    def ratio(num, den):
        return num / den if den > 0 else None

    return RateMetrics(
        accuracy=ratio(c.tp + c.tn, c.total),
        dsc=ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        sensitivity=ratio(c.tp, c.tp + c.fn),
        specificity=ratio(c.tn, c.tn + c.fp),
        precision=ratio(c.tp, c.tp + c.fp),
    )


def mask_points(mask: BinaryMask) -> np.ndarray:
    """(N, 3) voxel coordinates of all positive voxels."""
    return np.argwhere(mask.as3d() > 0).astype(np.float64)


def ahd(g_voxels, s_voxels, spacing=None) -> float:
    """Average Hausdorff distance between two point sets.

    Half the sum of the two directed mean nearest-neighbor distances.
    Euclidean, in voxel units by default or in mm when spacing is given.
    """
    g = np.atleast_2d(np.asarray(g_voxels, dtype=np.float64))
    s = np.atleast_2d(np.asarray(s_voxels, dtype=np.float64))
    if g.size == 0 or s.size == 0:
        raise UndefinedMetricError("average Hausdorff distance needs two nonempty sets")
    if spacing is not None:
        scale = np.asarray(spacing, dtype=np.float64)
        g = g * scale
        s = s * scale
    d_gs = cKDTree(s).query(g)[0]
    d_sg = cKDTree(g).query(s)[0]
    return 0.5 * (float(d_gs.mean()) + float(d_sg.mean()))


def dsclog(dsc_percent: float, n_params: int) -> float:
    """Overlap score (percent) per decade of model size: DSC / log10(#params)."""
    if n_params < 2:
        raise ParameterError(f"n_params must be >= 2, got {n_params}")
    if not 0.0 <= dsc_percent <= 100.0:
        raise ParameterError(f"dsc_percent must be in [0, 100], got {dsc_percent}")
    return dsc_percent / np.log10(n_params)


@dataclass
class MetricsReport:
    """Full evaluation summary; `undefined` lists metrics with no value."""

    dsc: float | None
    sensitivity: float | None
    specificity: float | None
    accuracy: float | None
    precision: float | None
    ahd: float | None
    ahd_units: str
    dsclog: float | None = None
    undefined: tuple[str, ...] = ()

    def to_json(self) -> str:
        doc = {
            "dsc": self.dsc,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "ahd": self.ahd,
            "ahd_units": self.ahd_units,
            "undefined": list(self.undefined),
        }
        if self.dsclog is not None:
            doc["dsclog"] = self.dsclog
        return json.dumps(doc, indent=2)


def evaluate_masks(
    pred: BinaryMask,
    gt: BinaryMask,
    spacing=None,
    n_params: int | None = None,
) -> MetricsReport:
    """Assemble the full metric report for a predicted mask."""
    rates = rate_metrics(confusion(pred, gt))
    try:
        distance = ahd(mask_points(gt), mask_points(pred), spacing=spacing)
    except UndefinedMetricError:
        distance = None
    undefined = tuple(
        name
        for name, value in (
            ("dsc", rates.dsc),
            ("sensitivity", rates.sensitivity),
            ("specificity", rates.specificity),
            ("accuracy", rates.accuracy),
            ("precision", rates.precision),
            ("ahd", distance),
        )
        if value is None
    )
    score = None
    if n_params is not None and rates.dsc is not None:
        score = dsclog(100.0 * rates.dsc, n_params)
    return MetricsReport(
        dsc=rates.dsc,
        sensitivity=rates.sensitivity,
        specificity=rates.specificity,
        accuracy=rates.accuracy,
        precision=rates.precision,
        ahd=distance,
        ahd_units="mm" if spacing is not None else "voxel",
        dsclog=score,
        undefined=undefined,
    )
