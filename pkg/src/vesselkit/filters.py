"""Multi-scale vesselness filtering and histogram thresholding.

The vesselness measure combines three eigenvalue ratios of the per-voxel
Hessian: a plate-vs-tube ratio, a blob deviation, and the overall
second-order energy. Note the exponentials are negative -- the tube
conditions (l1 ~ 0, |l2| ~ |l3|, both negative) must map to HIGH response,
which only the decaying form does.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ParameterError
from .hessian import eig_sym3_arrays, hessian_field
from .volume import BinaryMask, Volume

DEFAULT_SCALES = (1.0, 1.5, 2.0, 2.5, 3.0)


@dataclass(frozen=True)
class FrangiParams:
    """Sensitivity thresholds and smoothing scales of the vesselness filter.

    gamma=None selects a data-adaptive value per scale: half the maximum
    Frobenius norm of the Hessian over the volume.
    """

    alpha: float = 0.5
    beta: float = 0.5
    gamma: float | None = None
    scales: tuple[float, ...] = DEFAULT_SCALES

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ParameterError("alpha and beta must be > 0")
        if self.gamma is not None and self.gamma <= 0:
            raise ParameterError("gamma must be > 0 (or None for data-adaptive)")
        if not self.scales:
            raise ParameterError("scales must be nonempty")
        if any(s <= 0 for s in self.scales):
            raise ParameterError("scales must be > 0")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ParameterError("scales must be strictly increasing")


def vesselness_single_scale(volume: Volume, sigma: float, alpha: float, beta: float, gamma: float | None) -> np.ndarray:
    """Vesselness response at one smoothing scale, as a float64 3D array."""
    fld = hessian_field(volume, sigma)
    l1, l2, l3 = eig_sym3_arrays(*fld.components())
    bright_tube = (l2 < 0) & (l3 < 0)

    a1, a2, a3 = np.abs(l1), np.abs(l2), np.abs(l3)
    energy2 = l1 * l1 + l2 * l2 + l3 * l3
    if gamma is None:
        # Half the max Frobenius norm of the Hessian over the volume.
        gamma = 0.5 * float(np.sqrt(energy2.max()))
        if gamma == 0.0:
            return np.zeros(volume.dims, dtype=np.float64)

    safe3 = np.where(bright_tube, a3, 1.0)
    ratio_a = a2 / safe3
    cross = np.where(bright_tube, a2 * a3, 1.0)
    ratio_b = a1 / np.sqrt(cross)

    response = (
        (1.0 - np.exp(-(ratio_a * ratio_a) / (2.0 * alpha * alpha)))
        * np.exp(-(ratio_b * ratio_b) / (2.0 * beta * beta))
        * (1.0 - np.exp(-energy2 / (2.0 * gamma * gamma)))
    )
    return np.where(bright_tube, response, 0.0)


def frangi_vesselness(volume: Volume, params: FrangiParams = FrangiParams()) -> Volume:
    """Multi-scale vesselness: voxelwise maximum of per-scale responses.

    Output is in [0, 1]; voxels failing the bright-tube sign condition
    (l2 >= 0 or l3 >= 0) are exactly 0.
    """
    best = None
    for sigma in params.scales:
        resp = vesselness_single_scale(volume, sigma, params.alpha, params.beta, params.gamma)
        best = resp if best is None else np.maximum(best, resp)
    return Volume(dims=volume.dims, spacing=volume.spacing, data=best.ravel(order="F"))


def otsu_threshold(volume: Volume, n_bins: int = 256) -> float:
    """Histogram threshold maximizing the between-class variance.

    Builds an n_bins histogram over [min, max] and returns the interior bin
    edge t that maximizes w1*w2*(mu1 - mu2)^2; ties break toward the lowest t.
    Equivalently minimizes the within-class variance (the two criteria select
    the same threshold).
    """
    if n_bins < 2:
        raise ParameterError(f"n_bins must be >= 2, got {n_bins}")
    data = volume.data.astype(np.float64)
    vmin, vmax = float(data.min()), float(data.max())
    if vmin == vmax:
        raise DegenerateInputError("cannot threshold a constant volume")
    counts, edges = np.histogram(data, bins=n_bins, range=(vmin, vmax))
    w = counts.astype(np.float64) / counts.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])

    w1 = np.cumsum(w)[:-1]                      # class weights for split after bin k
    w2 = 1.0 - w1
    m = np.cumsum(w * centers)
    total_mean = m[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        mu1 = m[:-1] / w1
        mu2 = (total_mean - m[:-1]) / w2
    sigma_b = w1 * w2 * (mu1 - mu2) ** 2
    sigma_b = np.where((w1 > 0) & (w2 > 0), sigma_b, -np.inf)
    best = int(np.argmax(sigma_b))              # argmax takes the first (lowest-t) maximum
    return float(edges[best + 1])


def binarize(volume: Volume, threshold: float) -> BinaryMask:
    """Mask of voxels with value strictly greater than the threshold."""
    return BinaryMask(dims=volume.dims, data=(volume.data > threshold).astype(np.uint8))
