"""Core 3D volume containers and voxelwise operations.

A volume is a scalar grid with voxel spacing. Data is stored flat in
x-fastest order, i.e. element (ix, iy, iz) lives at ix + nx*(iy + ny*iz);
`as3d()` exposes the same memory as an (nx, ny, nz) array.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError

VOLUME_DTYPE = np.float32


def _check_dims(dims) -> tuple[int, int, int]:
    if len(dims) != 3 or any(int(d) <= 0 for d in dims):
        raise ShapeError(f"dims must be three positive voxel counts, got {dims!r}")
    return tuple(int(d) for d in dims)


@dataclass
class Volume:
    """Scalar 3D image: dims (nx, ny, nz), spacing in mm, flat float32 data."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.dims = _check_dims(self.dims)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ShapeError(f"spacing must be three positive lengths, got {self.spacing!r}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.data = np.asarray(self.data, dtype=VOLUME_DTYPE).ravel()
        n = self.dims[0] * self.dims[1] * self.dims[2]
        if self.data.size != n:
            raise ShapeError(f"data length {self.data.size} != nx*ny*nz = {n}")
        if not np.all(np.isfinite(self.data)):
            raise ShapeError("volume data contains NaN or Inf")

    @classmethod
    def from3d(cls, arr, spacing=(1.0, 1.0, 1.0)) -> "Volume":
        """Wrap an (nx, ny, nz) array indexed as arr[ix, iy, iz]."""
        arr = np.asarray(arr)
        if arr.ndim != 3:
            raise ShapeError(f"expected a 3D array, got ndim={arr.ndim}")
        return cls(dims=arr.shape, spacing=spacing, data=arr.ravel(order="F"))

    def as3d(self) -> np.ndarray:
        """View the data as an (nx, ny, nz) array (no copy)."""
        return self.data.reshape(self.dims, order="F")

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Volume":
        return Volume(dims=self.dims, spacing=self.spacing, data=self.data.copy())


@dataclass
class BinaryMask:
    """Voxelwise {0, 1} labels with the same layout conventions as Volume."""

    dims: tuple[int, int, int]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.dims = _check_dims(self.dims)
        self.data = np.asarray(self.data).ravel()
        n = self.dims[0] * self.dims[1] * self.dims[2]
        if self.data.size != n:
            raise ShapeError(f"mask length {self.data.size} != nx*ny*nz = {n}")
        if self.data.dtype != np.uint8:
            as_u8 = self.data.astype(np.uint8)
            if not np.array_equal(as_u8, self.data):
                raise ShapeError("mask values must be exactly 0 or 1")
            self.data = as_u8
        if self.data.size and int(self.data.max(initial=0)) > 1:
            raise ShapeError("mask values must be exactly 0 or 1")

    @classmethod
    def from3d(cls, arr) -> "BinaryMask":
        arr = np.asarray(arr)
        if arr.ndim != 3:
            raise ShapeError(f"expected a 3D array, got ndim={arr.ndim}")
        return cls(dims=arr.shape, data=arr.ravel(order="F"))

    def as3d(self) -> np.ndarray:
        return self.data.reshape(self.dims, order="F")

    @property
    def size(self) -> int:
        return self.data.size

    def count(self) -> int:
        """Number of positive voxels."""
        return int(self.data.sum())

    def copy(self) -> "BinaryMask":
        return BinaryMask(dims=self.dims, data=self.data.copy())


def z_normalize(volume: Volume) -> Volume:
    """Shift/scale intensities to zero mean and unit standard deviation.

    Statistics are computed over all voxels of the volume. Raises
    DegenerateInputError for constant volumes (zero variance).
    """
    if volume.size < 2:
        raise DegenerateInputError("z-normalization needs at least 2 voxels")
    data = volume.data.astype(np.float64)
    mu = data.mean()
    sigma = data.std()
    if sigma == 0.0:
        raise DegenerateInputError("cannot z-normalize a constant volume")
    out = (data - mu) / sigma
    return Volume(dims=volume.dims, spacing=volume.spacing, data=out)


def apply_mask(volume: Volume, mask: BinaryMask) -> Volume:
    """Zero out every voxel where the mask is 0; keep the rest unchanged."""
    if volume.dims != mask.dims:
        raise ShapeError(f"volume dims {volume.dims} != mask dims {mask.dims}")
    out = volume.data * mask.data
    return Volume(dims=volume.dims, spacing=volume.spacing, data=out)


def mask_and(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    """Voxelwise logical AND of two masks."""
    if a.dims != b.dims:
        raise ShapeError(f"mask dims {a.dims} != {b.dims}")
    return BinaryMask(dims=a.dims, data=a.data & b.data)
