"""Intensity and geometric augmentation transforms.

Both transforms are deterministic under a fixed seed and preserve dims and
spacing. Defaults follow conventional contrast-jitter / mild-warp magnitudes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .volume import BinaryMask, Volume

DEFAULT_LOG_GAMMA_RANGE = (-0.3, 0.3)
DEFAULT_CONTROL_GRID = (7, 7, 7)
DEFAULT_MAX_DISPLACEMENT = 7.0


@dataclass(frozen=True)
class AugmentParams:
    """Knobs for the gamma + elastic augmentation pair used in training."""

    log_gamma_range: tuple[float, float] = DEFAULT_LOG_GAMMA_RANGE
    control_grid: tuple[int, int, int] = DEFAULT_CONTROL_GRID
    max_displacement: float = DEFAULT_MAX_DISPLACEMENT


def random_gamma(volume: Volume, log_gamma_range=DEFAULT_LOG_GAMMA_RANGE, rng_seed: int = 0) -> Volume:
    """Contrast jitter: x -> x^gamma on min-max rescaled intensities.

    gamma = exp(u) with u drawn uniformly from log_gamma_range. A constant
    volume is returned unchanged (no rescale possible).
    """
    lo, hi = log_gamma_range
    if lo > hi:
        raise ParameterError(f"log_gamma_range must satisfy lo <= hi, got {log_gamma_range}")
    data = volume.data.astype(np.float64)
    vmin, vmax = float(data.min()), float(data.max())
    if vmin == vmax:
        return volume.copy()
    rng = np.random.default_rng(rng_seed)
    gamma = float(np.exp(rng.uniform(lo, hi)))
    unit = (data - vmin) / (vmax - vmin)
    out = unit**gamma * (vmax - vmin) + vmin
    return Volume(dims=volume.dims, spacing=volume.spacing, data=out)


def elastic_deform(
    volume: Volume,
    companion_mask: BinaryMask | None = None,
    control_grid=DEFAULT_CONTROL_GRID,
    max_displacement_voxels: float = DEFAULT_MAX_DISPLACEMENT,
    rng_seed: int = 0,
) -> tuple[Volume, BinaryMask | None]:
    """Dense random elastic deformation of a volume (and optional mask).

    A random displacement vector (uniform per component in [-max, +max]) is
    drawn for each control point; the dense field is the trilinear
    interpolation of the control lattice. The volume is resampled with
    trilinear interpolation, the mask with nearest-neighbor and re-binarized;
    out-of-bounds samples clamp to the border. The same field is applied to
    both outputs.
    """
    cg = tuple(int(c) for c in control_grid)
    if len(cg) != 3 or any(c < 2 for c in cg):
        raise ParameterError(f"control grid needs >= 2 points per axis, got {control_grid}")
    if max_displacement_voxels < 0:
        raise ParameterError("max_displacement_voxels must be >= 0")
    if companion_mask is not None and companion_mask.dims != volume.dims:
        raise ParameterError(f"mask dims {companion_mask.dims} != volume dims {volume.dims}")

    dims = volume.dims
    rng = np.random.default_rng(rng_seed)
    control = rng.uniform(-max_displacement_voxels, max_displacement_voxels, size=(3,) + cg)

    # Map each voxel index to its (fractional) control-lattice coordinate and
    # interpolate the lattice trilinearly to get a dense displacement field.
    axes = [
        np.arange(n, dtype=np.float64) * ((c - 1) / (n - 1) if n > 1 else 0.0)
        for n, c in zip(dims, cg)
    ]
    cx, cy, cz = np.meshgrid(*axes, indexing="ij")
    lattice_coords = np.stack([cx, cy, cz])
    disp = np.empty((3,) + dims, dtype=np.float64)
    for k in range(3):
        disp[k] = ndimage.map_coordinates(control[k], lattice_coords, order=1, mode="nearest")

    ix, iy, iz = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    sample = np.stack([ix, iy, iz]) + disp

    warped = ndimage.map_coordinates(volume.as3d().astype(np.float64), sample, order=1, mode="nearest")
    out_vol = Volume(dims=dims, spacing=volume.spacing, data=warped.ravel(order="F"))

    out_mask = None
    if companion_mask is not None:
        warped_mask = ndimage.map_coordinates(companion_mask.as3d(), sample, order=0, mode="nearest")
        out_mask = BinaryMask(dims=dims, data=(warped_mask > 0).astype(np.uint8).ravel(order="F"))
    return out_vol, out_mask
