"""Synthetic tubular phantoms: bright cylinders on a dark background.

Desk-scale stand-ins for angiography volumes, with exact ground-truth masks.
A phantom spec is a JSON-serializable description; see `PhantomSpec.from_json`
for the schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, ShapeError
from .volume import BinaryMask, Volume


@dataclass(frozen=True)
class Tube:
    """One cylinder segment: endpoints in voxel coordinates, radius in voxels."""

    start: tuple[float, float, float]
    end: tuple[float, float, float]
    radius: float
    intensity: float


@dataclass
class PhantomSpec:
    """Geometry + intensity description of a synthetic tube phantom.

    JSON schema (unknown keys rejected)::

        {
          "dims": [nx, ny, nz],
          "spacing": [sx, sy, sz],          # optional, mm, default [1,1,1]
          "background": 30.0,
          "noise_sigma": 2.0,               # additive Gaussian, 0 disables
          "seed": 7,
          "tubes": [
            {"start": [x,y,z], "end": [x,y,z], "radius": 2.0, "intensity": 130.0},
            ...
          ]
        }
    """

    dims: tuple[int, int, int]
    tubes: list[Tube] = field(default_factory=list)
    background: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) <= 0 for d in self.dims):
            raise ShapeError(f"dims must be three positive counts, got {self.dims!r}")
        self.dims = tuple(int(d) for d in self.dims)
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")
        for t in self.tubes:
            if t.radius <= 0:
                raise ParameterError(f"tube radius must be > 0, got {t.radius}")
            for p in (t.start, t.end):
                if len(p) != 3 or any(c < 0 or c > d - 1 for c, d in zip(p, self.dims)):
                    raise ParameterError(f"tube endpoint {p} outside volume dims {self.dims}")
            if t.intensity <= self.background:
                raise ParameterError(
                    f"tube intensity {t.intensity} must exceed background {self.background} (bright tubes)"
                )

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        doc = json.loads(text)
        allowed = {"dims", "spacing", "background", "noise_sigma", "seed", "tubes"}
        unknown = set(doc) - allowed
        if unknown:
            raise ParameterError(f"unknown phantom spec keys: {sorted(unknown)}")
        tubes = []
        for i, td in enumerate(doc.get("tubes", [])):
            bad = set(td) - {"start", "end", "radius", "intensity"}
            if bad:
                raise ParameterError(f"unknown tube keys in tubes[{i}]: {sorted(bad)}")
            tubes.append(
                Tube(
                    start=tuple(float(c) for c in td["start"]),
                    end=tuple(float(c) for c in td["end"]),
                    radius=float(td["radius"]),
                    intensity=float(td["intensity"]),
                )
            )
        return cls(
            dims=tuple(doc["dims"]),
            tubes=tubes,
            background=float(doc.get("background", 0.0)),
            noise_sigma=float(doc.get("noise_sigma", 0.0)),
            seed=int(doc.get("seed", 0)),
            spacing=tuple(doc.get("spacing", (1.0, 1.0, 1.0))),
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "dims": list(self.dims),
                "spacing": list(self.spacing),
                "background": self.background,
                "noise_sigma": self.noise_sigma,
                "seed": self.seed,
                "tubes": [
                    {
                        "start": list(t.start),
                        "end": list(t.end),
                        "radius": t.radius,
                        "intensity": t.intensity,
                    }
                    for t in self.tubes
                ],
            },
            indent=2,
        )


def _tube_mask_box(dims, tube: Tube):
    """Voxels within `radius` of the tube's axis segment, restricted to a
    bounding box for speed. Returns (box slices, bool array)."""
    p0 = np.asarray(tube.start, dtype=np.float64)
    p1 = np.asarray(tube.end, dtype=np.float64)
    r = float(tube.radius)
    lo = np.floor(np.minimum(p0, p1) - r - 1).astype(int)
    hi = np.ceil(np.maximum(p0, p1) + r + 1).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, np.asarray(dims) - 1)
    sl = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
    gx, gy, gz = np.meshgrid(
        *(np.arange(a, b + 1, dtype=np.float64) for a, b in zip(lo, hi)), indexing="ij"
    )
    d = p1 - p0
    l2 = float(d @ d)
    vx, vy, vz = gx - p0[0], gy - p0[1], gz - p0[2]
    if l2 == 0.0:
        cx, cy, cz = vx, vy, vz
    else:
        t = np.clip((vx * d[0] + vy * d[1] + vz * d[2]) / l2, 0.0, 1.0)
        cx, cy, cz = vx - t * d[0], vy - t * d[1], vz - t * d[2]
    dist2 = cx * cx + cy * cy + cz * cz
    return sl, dist2 <= r * r


def make_phantom(spec: PhantomSpec) -> tuple[Volume, BinaryMask]:
    """Render a phantom volume and its exact ground-truth mask.

    The mask is 1 exactly where the distance from the voxel center to any
    tube segment is <= that tube's radius. Deterministic for a fixed seed.
    """
    vol = np.full(spec.dims, spec.background, dtype=np.float64)
    mask = np.zeros(spec.dims, dtype=np.uint8)
    for tube in spec.tubes:
        sl, inside = _tube_mask_box(spec.dims, tube)
        mask[sl][inside] = 1
        vol[sl][inside] = tube.intensity
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        vol += rng.normal(0.0, spec.noise_sigma, size=spec.dims)
    return (
        Volume(dims=spec.dims, spacing=spec.spacing, data=vol.ravel(order="F")),
        BinaryMask(dims=spec.dims, data=mask.ravel(order="F")),
    )
