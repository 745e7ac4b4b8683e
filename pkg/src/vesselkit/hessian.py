"""Gaussian smoothing, second-derivative stencils, per-voxel Hessian fields,
and analytic eigenvalues of symmetric 3x3 matrices.

The stencil operator here is also the fixed (non-trainable) layer inside the
segmentation network, so forward taps and their adjoint live side by side.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import NumericError, ParameterError, ShapeError
from .volume import Volume

# ---------------------------------------------------------------------------
# Gaussian smoothing

def gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Normalized 1D Gaussian, truncated at +-ceil(4*sigma)."""
    radius = math.ceil(4.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def smooth3d(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing of a 3D float64 array, clamped borders."""
    arr = np.asarray(arr, dtype=np.float64)
    if sigma == 0.0:
        return arr.copy()
    k = gaussian_kernel_1d(sigma)
    out = arr
    for axis in range(3):
        out = ndimage.convolve1d(out, k, axis=axis, mode="nearest")
    return out


def gaussian_smooth(volume: Volume, sigma_voxels: float) -> Volume:
    """Smooth a volume with an isotropic Gaussian of scale sigma (voxels)."""
    if sigma_voxels < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma_voxels}")
    out = smooth3d(volume.as3d(), float(sigma_voxels))
    return Volume(dims=volume.dims, spacing=volume.spacing, data=out.ravel(order="F"))


# ---------------------------------------------------------------------------
# Second-derivative stencils (shared with the network's fixed Hessian layer)
#
# Pure second derivative along one axis: (1, -2, 1).
# Mixed derivative: composition of central first differences (-1/2, 0, 1/2)
# along the two axes. Border voxels use clamped (replicated) neighbors, which
# is equivalent to evaluating the taps on an edge-padded array.

def _axis_offsets(axis: int, off: int) -> tuple[int, int, int]:
    o = [0, 0, 0]
    o[axis] = off
    return tuple(o)


def _mixed_offsets(ax_a: int, ax_b: int):
    for sa in (+1, -1):
        for sb in (+1, -1):
            o = [0, 0, 0]
            o[ax_a] = sa
            o[ax_b] = sb
            yield tuple(o), 0.25 * sa * sb


# taps[i] = list of ((ox, oy, oz), weight) for component i in the order
# (xx, yy, zz, xy, xz, yz)
HESSIAN_TAPS: tuple[tuple[tuple[tuple[int, int, int], float], ...], ...] = tuple(
    [
        tuple([(_axis_offsets(a, +1), 1.0), (_axis_offsets(a, 0), -2.0), (_axis_offsets(a, -1), 1.0)])
        for a in range(3)
    ]
    + [tuple(_mixed_offsets(a, b)) for a, b in ((0, 1), (0, 2), (1, 2))]
)

COMPONENT_NAMES = ("xx", "yy", "zz", "xy", "xz", "yz")


def _pad1(arr: np.ndarray) -> np.ndarray:
    pads = [(0, 0)] * (arr.ndim - 3) + [(1, 1)] * 3
    return np.pad(arr, pads, mode="edge")


def _tap_slice(ndim: int, shape3, off) -> tuple:
    sl = [slice(None)] * (ndim - 3)
    for n, o in zip(shape3, off):
        sl.append(slice(1 + o, 1 + o + n))
    return tuple(sl)


def hessian_components(arr: np.ndarray) -> tuple[np.ndarray, ...]:
    """Six Hessian component maps (xx, yy, zz, xy, xz, yz) of `arr`.

    Operates on the last three axes; any leading axes are treated as
    independent channels.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim < 3:
        raise ShapeError("need at least a 3D array")
    shape3 = arr.shape[-3:]
    p = _pad1(arr)
    comps = []
    for taps in HESSIAN_TAPS:
        out = None
        for off, w in taps:
            term = p[_tap_slice(arr.ndim, shape3, off)]
            if out is None:
                out = w * term
            else:
                out += w * term
        comps.append(out)
    return tuple(comps)


def fold_edge_padding(buf: np.ndarray, radius: int) -> np.ndarray:
    """Adjoint of edge-padding on the last three axes: fold each padded rim
    onto the border voxels, then crop. Mutates and returns a view of buf."""
    ndim = buf.ndim
    for k in range(3):
        axis = ndim - 3 + k
        m = buf.shape[axis]
        lo = [slice(None)] * ndim
        tgt = [slice(None)] * ndim
        lo[axis], tgt[axis] = slice(0, radius), slice(radius, radius + 1)
        buf[tuple(tgt)] += buf[tuple(lo)].sum(axis=axis, keepdims=True)
        lo[axis], tgt[axis] = slice(m - radius, m), slice(m - radius - 1, m - radius)
        buf[tuple(tgt)] += buf[tuple(lo)].sum(axis=axis, keepdims=True)
    crop = [slice(None)] * (ndim - 3) + [slice(radius, -radius)] * 3
    return buf[tuple(crop)]


def hessian_adjoint(grads) -> np.ndarray:
    """Adjoint of `hessian_components`: map six cotangent arrays back to the
    input gradient. Needed by the network's backward pass."""
    grads = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(grads) != 6:
        raise ShapeError("expected six component gradients")
    shape = grads[0].shape
    shape3 = shape[-3:]
    ndim = grads[0].ndim
    padded_shape = shape[:-3] + tuple(n + 2 for n in shape3)
    buf = np.zeros(padded_shape, dtype=np.float64)
    for taps, g in zip(HESSIAN_TAPS, grads):
        for off, w in taps:
            buf[_tap_slice(ndim, shape3, off)] += w * g
    return fold_edge_padding(buf, 1)


# ---------------------------------------------------------------------------
# Hessian field of a volume

@dataclass
class HessianField:
    """Per-voxel symmetric 3x3 second-derivative tensor (6 unique components)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    scale: float
    xx: np.ndarray = field(repr=False)
    yy: np.ndarray = field(repr=False)
    zz: np.ndarray = field(repr=False)
    xy: np.ndarray = field(repr=False)
    xz: np.ndarray = field(repr=False)
    yz: np.ndarray = field(repr=False)

    def components(self) -> tuple[np.ndarray, ...]:
        return (self.xx, self.yy, self.zz, self.xy, self.xz, self.yz)


def hessian_field(volume: Volume, sigma_voxels: float) -> HessianField:
    """Smooth at sigma, then apply the central-difference stencils."""
    if sigma_voxels < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma_voxels}")
    if min(volume.dims) < 5:
        raise ShapeError(f"dims {volume.dims} too small for a Hessian field (need >= 5 per axis)")
    smoothed = smooth3d(volume.as3d(), float(sigma_voxels))
    comps = hessian_components(smoothed)
    return HessianField(volume.dims, volume.spacing, float(sigma_voxels), *comps)


# ---------------------------------------------------------------------------
# Analytic eigenvalues of symmetric 3x3 matrices

@dataclass(frozen=True)
class EigenTriple:
    """Eigenvalues ordered by |l1| <= |l2| <= |l3|."""

    l1: float
    l2: float
    l3: float


def eig_sym3_arrays(xx, yy, zz, xy, xz, yz) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized analytic eigenvalues, sorted by absolute value ascending.

    Uses the trigonometric solution of the characteristic cubic; the cosine
    argument is clamped to [-1, 1] so nearly-degenerate spectra stay finite.
    """
    xx, yy, zz, xy, xz, yz = (np.asarray(a, dtype=np.float64) for a in (xx, yy, zz, xy, xz, yz))
    q = (xx + yy + zz) / 3.0
    p1 = xy * xy + xz * xz + yz * yz
    dxx, dyy, dzz = xx - q, yy - q, zz - q
    p2 = dxx * dxx + dyy * dyy + dzz * dzz + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    safe_p = np.where(p > 0.0, p, 1.0)
    bxx, byy, bzz = dxx / safe_p, dyy / safe_p, dzz / safe_p
    bxy, bxz, byz = xy / safe_p, xz / safe_p, yz / safe_p
    det_b = (
        bxx * (byy * bzz - byz * byz)
        - bxy * (bxy * bzz - byz * bxz)
        + bxz * (bxy * byz - byy * bxz)
    )
    r = np.clip(det_b / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    e1 = q + 2.0 * p * np.cos(phi)
    e3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    e2 = 3.0 * q - e1 - e3
    vals = np.stack([e1, e2, e3], axis=-1)
    vals = np.where(p[..., None] > 0.0, vals, q[..., None])
    order = np.argsort(np.abs(vals), axis=-1, kind="stable")
    vals = np.take_along_axis(vals, order, axis=-1)
    return vals[..., 0], vals[..., 1], vals[..., 2]


def eig_sym3(h_xx, h_yy, h_zz, h_xy, h_xz, h_yz) -> EigenTriple:
    """Eigenvalues of one symmetric 3x3 matrix given its six components."""
    vals = (h_xx, h_yy, h_zz, h_xy, h_xz, h_yz)
    if not all(math.isfinite(float(v)) for v in vals):
        raise NumericError(f"non-finite matrix entries: {vals}")
    l1, l2, l3 = eig_sym3_arrays(*(np.float64(v) for v in vals))
    return EigenTriple(float(l1), float(l2), float(l3))


def eig_field_arrays(fld: HessianField) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-voxel eigenvalues of a Hessian field as float64 arrays."""
    return eig_sym3_arrays(*fld.components())


def eig_field(fld: HessianField) -> tuple[Volume, Volume, Volume]:
    """Per-voxel eigenvalues as three Volumes (|l1| <= |l2| <= |l3|)."""
    l1, l2, l3 = eig_field_arrays(fld)
    mk = lambda a: Volume(dims=fld.dims, spacing=fld.spacing, data=a.ravel(order="F"))
    return mk(l1), mk(l2), mk(l3)
