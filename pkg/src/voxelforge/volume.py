"""Volumetric container and the spatial pad/crop primitives.

Arrays are indexed ``(depth, height, width)``. World geometry follows the
scanner convention: millimetre coordinates ``(x, y, z)`` with x along the
width axis, y along height and z along depth. ``direction`` holds the unit
world direction of each index axis in its columns, ordered (x, y, z).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "RAW16_MAX",
    "IntensityDomain",
    "GeometryError",
    "IntensityDomainError",
    "Volume",
    "CropPadPlan",
    "minmax_normalize",
    "pad_or_crop",
]

RAW16_MAX = 65535.0  # 2**16 - 1, the intensity ceiling for 16-bit scanner data

_ORTHO_TOL = 1e-6


class IntensityDomain(enum.Enum):
    """Working intensity range a volume is tagged with."""

    RAW16 = "raw16"  # scanner counts in [0, 65535]
    UNIT = "unit"    # normalized reals in [0, 1]
    MASK = "mask"    # binary {0, 1}


class GeometryError(ValueError):
    """Inconsistent shape, spacing or direction metadata."""


class IntensityDomainError(ValueError):
    """Voxel values violate the volume's declared intensity domain."""


def _infer_domain(voxels: np.ndarray) -> IntensityDomain:
    if voxels.dtype == np.uint16:
        return IntensityDomain.RAW16
    if voxels.dtype == np.uint8:
        return IntensityDomain.MASK
    if voxels.dtype == np.float32:
        if voxels.size == 0 or (voxels.min() >= 0.0 and voxels.max() <= 1.0):
            return IntensityDomain.UNIT
        return IntensityDomain.RAW16
    raise IntensityDomainError(
        f"cannot infer intensity domain for dtype {voxels.dtype}; "
        "expected uint16, uint8 or float32"
    )


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3D scalar grid with world geometry.

    Parameters
    ----------
    voxels : ndarray, shape (depth, height, width)
        Scalar grid. uint16 for raw scanner data, float32 for normalized
        data, uint8 for masks. The array is frozen after construction.
    spacing : (float, float, float)
        Voxel size in mm per axis, same order as ``voxels.shape``.
    origin : array-like of 3 floats
        World (x, y, z) position in mm of the centre of voxel (0, 0, 0).
    direction : 3x3 array
        Orthonormal matrix; column j is the world direction of increasing
        index along the j-th axis in (x=width, y=height, z=depth) order.
    intensity_domain : IntensityDomain, optional
        Inferred from dtype when omitted.
    raw_range : (float, float), optional
        Original (min, max) recorded by :func:`minmax_normalize`, used to
        restore raw-scale intensities for evaluation.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: np.ndarray = None  # type: ignore[assignment]
    direction: np.ndarray = None  # type: ignore[assignment]
    intensity_domain: IntensityDomain = None  # type: ignore[assignment]
    raw_range: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        voxels = np.asarray(self.voxels)
        if voxels.ndim != 3:
            raise GeometryError(f"voxels must be 3D, got ndim={voxels.ndim}")
        if voxels.size == 0:
            raise GeometryError("volume must have at least one voxel per axis")
        voxels = np.ascontiguousarray(voxels)
        voxels.setflags(write=False)
        object.__setattr__(self, "voxels", voxels)

        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise GeometryError(f"spacing must be 3 positive values, got {self.spacing}")
        object.__setattr__(self, "spacing", spacing)

        origin = np.zeros(3) if self.origin is None else np.asarray(self.origin, dtype=float)
        if origin.shape != (3,):
            raise GeometryError(f"origin must be a 3-vector, got shape {origin.shape}")
        origin.setflags(write=False)
        object.__setattr__(self, "origin", origin)

        direction = np.eye(3) if self.direction is None else np.asarray(self.direction, dtype=float)
        if direction.shape != (3, 3):
            raise GeometryError("direction must be a 3x3 matrix")
        if np.max(np.abs(direction.T @ direction - np.eye(3))) > _ORTHO_TOL:
            raise GeometryError("direction matrix is not orthonormal within 1e-6")
        direction.setflags(write=False)
        object.__setattr__(self, "direction", direction)

        domain = self.intensity_domain
        if domain is None:
            domain = _infer_domain(voxels)
        object.__setattr__(self, "intensity_domain", domain)
        self._check_domain(voxels, domain)

        if self.raw_range is not None:
            lo, hi = self.raw_range
            object.__setattr__(self, "raw_range", (float(lo), float(hi)))

    @staticmethod
    def _check_domain(voxels: np.ndarray, domain: IntensityDomain) -> None:
        if domain is IntensityDomain.RAW16:
            if voxels.dtype not in (np.dtype(np.uint16), np.dtype(np.float32)):
                raise IntensityDomainError(
                    f"raw16 volumes must be uint16 or float32, got {voxels.dtype}"
                )
            if voxels.dtype == np.float32:
                lo, hi = float(voxels.min()), float(voxels.max())
                if lo < 0.0 or hi > RAW16_MAX:
                    raise IntensityDomainError(
                        f"raw16 values must lie in [0, {RAW16_MAX:.0f}], got [{lo}, {hi}]"
                    )
        elif domain is IntensityDomain.UNIT:
            if voxels.dtype != np.float32:
                raise IntensityDomainError(f"unit volumes must be float32, got {voxels.dtype}")
            lo, hi = float(voxels.min()), float(voxels.max())
            if lo < 0.0 or hi > 1.0:
                raise IntensityDomainError(f"unit values must lie in [0, 1], got [{lo}, {hi}]")
        elif domain is IntensityDomain.MASK:
            vals = np.unique(voxels)
            if not np.isin(vals, (0, 1)).all():
                raise IntensityDomainError("mask volumes may only contain values 0 and 1")

    # -- basic geometry -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape  # type: ignore[return-value]

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]

    @property
    def height(self) -> int:
        return self.voxels.shape[1]

    @property
    def width(self) -> int:
        return self.voxels.shape[2]

    @property
    def spacing_xyz(self) -> np.ndarray:
        """Voxel size reordered to world (x, y, z)."""
        return np.array(self.spacing[::-1], dtype=float)

    def index_to_world(self, indices: np.ndarray) -> np.ndarray:
        """Map voxel indices to world mm coordinates.

        ``indices`` has shape (..., 3) in (depth, height, width) order and
        may be fractional; returns world (x, y, z) of the same leading shape.
        """
        idx = np.asarray(indices, dtype=float)
        xyz = idx[..., ::-1] * self.spacing_xyz
        return xyz @ self.direction.T + self.origin

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`index_to_world`; exact because direction is orthonormal."""
        pts = np.asarray(points, dtype=float)
        xyz = (pts - self.origin) @ self.direction
        return (xyz / self.spacing_xyz)[..., ::-1]

    @property
    def world_center(self) -> np.ndarray:
        """World coordinates of the grid centre (mm)."""
        centre_idx = (np.array(self.shape, dtype=float) - 1.0) / 2.0
        return self.index_to_world(centre_idx)

    # -- derivation helpers -------------------------------------------------

    def with_voxels(
        self,
        voxels: np.ndarray,
        intensity_domain: IntensityDomain | None = None,
        origin: np.ndarray | None = None,
        raw_range: tuple[float, float] | None | str = "keep",
    ) -> "Volume":
        """New volume sharing this geometry with replaced voxel data."""
        kept = self.raw_range if raw_range == "keep" else raw_range
        return Volume(
            voxels=voxels,
            spacing=self.spacing,
            origin=self.origin if origin is None else origin,
            direction=self.direction,
            intensity_domain=intensity_domain,
            raw_range=kept,  # type: ignore[arg-type]
        )

    def as_mask(self) -> "Volume":
        """Re-tag a {0,1}-valued volume as a mask (uint8 storage)."""
        return self.with_voxels(
            self.voxels.astype(np.uint8), IntensityDomain.MASK, raw_range=None
        )


@dataclass(frozen=True)
class CropPadPlan:
    """Per-axis pad/crop amounts realising a target extent.

    Exactly one of pad/crop is nonzero per axis side. Padding uses fill
    value 0; the split between low and high sides is centred with the odd
    voxel going to the high-index side.
    """

    low_pad: tuple[int, int, int]
    high_pad: tuple[int, int, int]
    low_crop: tuple[int, int, int]
    high_crop: tuple[int, int, int]

    def __post_init__(self) -> None:
        for axis in range(3):
            pads = self.low_pad[axis] + self.high_pad[axis]
            crops = self.low_crop[axis] + self.high_crop[axis]
            if pads and crops:
                raise GeometryError(f"axis {axis}: plan both pads and crops")
            if min(self.low_pad[axis], self.high_pad[axis],
                   self.low_crop[axis], self.high_crop[axis]) < 0:
                raise GeometryError("plan amounts must be non-negative")

    @classmethod
    def for_target(cls, shape: Sequence[int], target: Sequence[int]) -> "CropPadPlan":
        """Plan mapping ``shape`` to ``target`` (same length, up to 3 axes)."""
        low_pad, high_pad, low_crop, high_crop = [0, 0, 0], [0, 0, 0], [0, 0, 0], [0, 0, 0]
        for axis, (cur, tgt) in enumerate(zip(shape, target)):
            if tgt <= 0:
                raise GeometryError(f"target extent must be positive, got {tgt}")
            diff = tgt - cur
            if diff > 0:
                low_pad[axis] = diff // 2
                high_pad[axis] = diff - low_pad[axis]
            elif diff < 0:
                low_crop[axis] = -diff // 2
                high_crop[axis] = -diff - low_crop[axis]
        return cls(tuple(low_pad), tuple(high_pad), tuple(low_crop), tuple(high_crop))

    def result_extent(self, shape: Sequence[int]) -> tuple[int, ...]:
        return tuple(
            n + self.low_pad[a] + self.high_pad[a] - self.low_crop[a] - self.high_crop[a]
            for a, n in enumerate(shape)
        )

    def apply(self, v: Volume) -> Volume:
        vox = v.voxels
        slices = tuple(
            slice(self.low_crop[a], vox.shape[a] - self.high_crop[a]) for a in range(3)
        )
        out = vox[slices]
        pad = tuple((self.low_pad[a], self.high_pad[a]) for a in range(3))
        if any(p != (0, 0) for p in pad):
            out = np.pad(out, pad, mode="constant", constant_values=0)
        # keep retained voxels at their world positions: index 0 moves by
        # (low_crop - low_pad) old voxels along each axis
        shift_dhw = np.array(
            [self.low_crop[a] - self.low_pad[a] for a in range(3)], dtype=float
        )
        shift_xyz = shift_dhw[::-1] * v.spacing_xyz
        origin = v.origin + v.direction @ shift_xyz
        return v.with_voxels(out, v.intensity_domain, origin=origin)


def minmax_normalize(v: Volume) -> Volume:
    """Rescale intensities linearly onto [0, 1].

    A constant volume maps to all zeros. The original (min, max) is stored
    in ``raw_range`` so evaluation can undo the scaling.
    """
    vox = v.voxels.astype(np.float64)
    lo = float(vox.min())
    hi = float(vox.max())
    if hi > lo:
        out = (vox - lo) / (hi - lo)
    else:
        out = np.zeros_like(vox)
    return v.with_voxels(
        out.astype(np.float32), IntensityDomain.UNIT, raw_range=(lo, hi)
    )


def pad_or_crop(v: Volume, target_hw: tuple[int, int]) -> Volume:
    """Centre the transverse plane onto ``target_hw`` = (height, width).

    The depth axis is never touched. Padding fills with 0 and the world
    origin shifts so every retained voxel keeps its world coordinates.
    """
    height, width = target_hw
    plan = CropPadPlan.for_target(v.shape, (v.depth, height, width))
    return plan.apply(v)
