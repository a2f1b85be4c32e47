"""Binary hole filling, CT table/background cleanup and slice trimming."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import IntensityDomain, Volume

__all__ = [
    "EmptyForeground",
    "RangeOutOfBounds",
    "EmptyVolume",
    "CONNECTIVITY",
    "fill_holes",
    "largest_component",
    "default_clean_threshold",
    "clean_ct",
    "TrimEntry",
    "trim_slices",
]


class EmptyForeground(ValueError):
    """Thresholding left no foreground voxels to clean."""


class RangeOutOfBounds(ValueError):
    """A trim range falls outside the volume or overlaps another range."""


class EmptyVolume(ValueError):
    """Trimming would delete every slice."""


# structuring elements by neighbourhood: faces only, or the full 26-neighbourhood
CONNECTIVITY = {
    "face": ndimage.generate_binary_structure(3, 1),
    "face+edge+corner": ndimage.generate_binary_structure(3, 3),
}


def _require_mask(mask: Volume) -> np.ndarray:
    if mask.intensity_domain is not IntensityDomain.MASK:
        raise ValueError("expected a mask volume; call Volume.as_mask() first")
    return mask.voxels.astype(bool)


def fill_holes(mask: Volume, connectivity: str = "face") -> Volume:
    """Set background cavities that do not reach the volume border to 1.

    Foreground voxels are never modified. ``connectivity`` selects how
    background voxels connect: ``face`` (6-neighbourhood, the default) or
    ``face+edge+corner`` (26-neighbourhood).
    """
    if connectivity not in CONNECTIVITY:
        raise ValueError(f"connectivity must be one of {sorted(CONNECTIVITY)}")
    filled = ndimage.binary_fill_holes(_require_mask(mask), structure=CONNECTIVITY[connectivity])
    return mask.with_voxels(filled.astype(np.uint8), IntensityDomain.MASK)


def largest_component(mask: Volume, connectivity: str = "face") -> Volume:
    """Keep only the largest connected foreground component."""
    arr = _require_mask(mask)
    labels, count = ndimage.label(arr, structure=CONNECTIVITY[connectivity])
    if count == 0:
        raise EmptyForeground("mask has no foreground voxels")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    keep = labels == sizes.argmax()
    return mask.with_voxels(keep.astype(np.uint8), IntensityDomain.MASK)


def default_clean_threshold(ct: Volume) -> float:
    """Threshold at 10% of the intensity range above the volume minimum."""
    vox = ct.voxels
    lo = float(vox.min())
    hi = float(vox.max())
    return lo + 0.1 * (hi - lo)


def clean_ct(
    ct: Volume, threshold: float | None = None, connectivity: str = "face"
) -> tuple[Volume, Volume]:
    """Suppress the patient table and background noise in a CT volume.

    Thresholds the volume, keeps the largest connected component (the
    head), fills its internal cavities, and zeroes everything outside.
    Returns the cleaned volume and the binary mask that produced it, which
    downstream weighting reuses.
    """
    if threshold is None:
        threshold = default_clean_threshold(ct)
    fg = ct.voxels > threshold
    if not fg.any():
        raise EmptyForeground(f"threshold {threshold} excludes every voxel")
    mask = ct.with_voxels(fg.astype(np.uint8), IntensityDomain.MASK, raw_range=None)
    mask = largest_component(mask, connectivity)
    mask = fill_holes(mask, connectivity)
    cleaned = ct.voxels * mask.voxels.astype(ct.voxels.dtype)
    return ct.with_voxels(cleaned, ct.intensity_domain), mask


@dataclass(frozen=True)
class TrimEntry:
    """Transverse slice ranges to delete from one subject's volumes.

    Ranges are half-open ``[lo, hi)`` slice indices along the depth axis;
    they must lie inside the volume and must not overlap.
    """

    subject: str
    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        ranges = tuple((int(lo), int(hi)) for lo, hi in self.ranges)
        object.__setattr__(self, "ranges", ranges)
        for lo, hi in ranges:
            if lo < 0 or hi <= lo:
                raise RangeOutOfBounds(f"{self.subject}: bad trim range [{lo}, {hi})")
        ordered = sorted(ranges)
        for (_, prev_hi), (lo, _) in zip(ordered, ordered[1:]):
            if lo < prev_hi:
                raise RangeOutOfBounds(f"{self.subject}: trim ranges overlap")

    @property
    def total(self) -> int:
        return sum(hi - lo for lo, hi in self.ranges)


def trim_slices(v: Volume, ranges) -> Volume:
    """Delete the given half-open depth ranges, keeping slice order.

    ``ranges`` is an iterable of (lo, hi) pairs or a :class:`TrimEntry`.
    The world origin follows the first retained slice so leading trims do
    not displace the remaining content.
    """
    if isinstance(ranges, TrimEntry):
        ranges = ranges.ranges
    entry = TrimEntry(subject="volume", ranges=tuple(ranges))
    keep = np.ones(v.depth, dtype=bool)
    for lo, hi in entry.ranges:
        if hi > v.depth:
            raise RangeOutOfBounds(f"trim range [{lo}, {hi}) exceeds depth {v.depth}")
        keep[lo:hi] = False
    if not keep.any():
        raise EmptyVolume("trim ranges would delete every slice")
    retained = np.flatnonzero(keep)
    voxels = v.voxels[retained]
    # the z index axis is direction column 2; spacing[0] is the depth step
    origin = v.origin + v.direction @ np.array([0.0, 0.0, retained[0] * v.spacing[0]])
    return v.with_voxels(voxels, v.intensity_domain, origin=origin)
