"""Aligned 3D patch extraction, overlap-averaged aggregation, boost weights.

Patch pairs couple a 32-cubed input grid with the 16-cubed target grid
centred inside its footprint. The anchor is the voxel index of the target
patch's low corner, so the input patch starts 8 voxels below the anchor on
every axis. Aggregation streams patches into a (sum, weight) accumulator
pair and divides once at the end, keeping memory at O(volume).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .volume import IntensityDomain, Volume

__all__ = [
    "INPUT_SIZE",
    "TARGET_SIZE",
    "MARGIN",
    "VolumeTooSmall",
    "AnchorOutOfBounds",
    "PatchPair",
    "anchor_lattice",
    "extract_pairs",
    "AggregationBuffer",
    "aggregate",
    "BoostWeightMap",
    "make_boost_weights",
]

INPUT_SIZE = 32
TARGET_SIZE = 16
MARGIN = (INPUT_SIZE - TARGET_SIZE) // 2


class VolumeTooSmall(ValueError):
    """Volume extents cannot hold a single input patch."""


class AnchorOutOfBounds(ValueError):
    """A target patch placed at this anchor leaves the volume."""


@dataclass(frozen=True)
class PatchPair:
    """One aligned (input, target) patch with its anchor index.

    The anchor is the (depth, height, width) index of the target patch's
    low corner in the source grid; the input low corner sits at
    ``anchor - MARGIN`` per axis.
    """

    input: np.ndarray
    target: np.ndarray
    anchor: tuple[int, int, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, "anchor", tuple(int(a) for a in self.anchor))


def anchor_lattice(
    extents: Sequence[int],
    stride: int,
    input_size: int = INPUT_SIZE,
    target_size: int = TARGET_SIZE,
) -> list[tuple[int, ...]]:
    """Regular anchor grid with the last position snapped inside the volume.

    Anchors are valid where the surrounding input patch stays in bounds:
    ``margin <= anchor <= extent - (input_size - margin)``. The final
    lattice position on each axis is clamped to that upper bound so border
    voxels stay covered; clamping duplicates are dropped.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    margin = (input_size - target_size) // 2
    per_axis: list[list[int]] = []
    for extent in extents:
        last = extent - (input_size - margin)
        if last < margin:
            raise VolumeTooSmall(
                f"extent {extent} cannot hold a {input_size}-wide input patch"
            )
        positions = list(range(margin, last + 1, stride))
        if positions[-1] != last:
            positions.append(last)
        per_axis.append(positions)
    return [
        (d, h, w)
        for d in per_axis[0]
        for h in per_axis[1]
        for w in per_axis[2]
    ]


def extract_pairs(
    mri: Volume,
    ct: Volume,
    stride: int = 8,
    min_foreground_fraction: float = 0.0,
    input_size: int = INPUT_SIZE,
    target_size: int = TARGET_SIZE,
) -> Iterator[PatchPair]:
    """Yield aligned patch pairs on a regular lattice, depth-major order.

    ``min_foreground_fraction`` drops pairs whose input patch has fewer
    than that fraction of nonzero voxels; the default keeps everything.
    """
    if mri.shape != ct.shape:
        raise ValueError(f"volumes do not share a grid: {mri.shape} vs {ct.shape}")
    margin = (input_size - target_size) // 2
    mri_vox = mri.voxels
    ct_vox = ct.voxels
    threshold = min_foreground_fraction * input_size**3
    for anchor in anchor_lattice(mri.shape, stride, input_size, target_size):
        lo = tuple(a - margin for a in anchor)
        input_patch = mri_vox[
            lo[0] : lo[0] + input_size,
            lo[1] : lo[1] + input_size,
            lo[2] : lo[2] + input_size,
        ]
        if threshold and np.count_nonzero(input_patch) < threshold:
            continue
        target_patch = ct_vox[
            anchor[0] : anchor[0] + target_size,
            anchor[1] : anchor[1] + target_size,
            anchor[2] : anchor[2] + target_size,
        ]
        yield PatchPair(
            input=input_patch.astype(np.float32),
            target=target_patch.astype(np.float32),
            anchor=anchor,
        )


def _taper(size: int) -> np.ndarray:
    # separable triangular profile, strictly positive, peaking mid-patch
    idx = np.arange(size, dtype=np.float64)
    return 1.0 - np.abs(2.0 * idx - (size - 1)) / (size + 1)


class AggregationBuffer:
    """Streaming (weighted sum, weight) accumulator over a full grid."""

    def __init__(self, shape: tuple[int, int, int], patch_weight: str = "uniform"):
        if patch_weight not in ("uniform", "center-tapered"):
            raise ValueError("patch_weight must be 'uniform' or 'center-tapered'")
        self.shape = tuple(int(s) for s in shape)
        self.patch_weight = patch_weight
        self.sum = np.zeros(self.shape, dtype=np.float64)
        self.weight = np.zeros(self.shape, dtype=np.float64)
        self._taper_cache: dict[tuple[int, int, int], np.ndarray] = {}
        self._value_lo = math.inf
        self._value_hi = -math.inf

    def _weights_for(self, patch_shape: tuple[int, int, int]) -> np.ndarray | None:
        if self.patch_weight == "uniform":
            return None
        cached = self._taper_cache.get(patch_shape)
        if cached is None:
            td, th, tw = (_taper(s) for s in patch_shape)
            cached = td[:, None, None] * th[None, :, None] * tw[None, None, :]
            self._taper_cache[patch_shape] = cached
        return cached

    def add(self, patch: np.ndarray, anchor: Sequence[int]) -> None:
        anchor = tuple(int(a) for a in anchor)
        if any(a < 0 or a + p > s for a, p, s in zip(anchor, patch.shape, self.shape)):
            raise AnchorOutOfBounds(
                f"patch of shape {patch.shape} at {anchor} leaves grid {self.shape}"
            )
        window = tuple(slice(a, a + p) for a, p in zip(anchor, patch.shape))
        weights = self._weights_for(patch.shape)
        if weights is None:
            self.sum[window] += patch
            self.weight[window] += 1.0
        else:
            self.sum[window] += weights * patch
            self.weight[window] += weights
        self._value_lo = min(self._value_lo, float(patch.min()))
        self._value_hi = max(self._value_hi, float(patch.max()))

    def merge(self, other: "AggregationBuffer") -> None:
        """Fold another worker's accumulator into this one."""
        if other.shape != self.shape or other.patch_weight != self.patch_weight:
            raise ValueError("can only merge buffers with identical configuration")
        self.sum += other.sum
        self.weight += other.weight
        self._value_lo = min(self._value_lo, other._value_lo)
        self._value_hi = max(self._value_hi, other._value_hi)

    @property
    def coverage(self) -> np.ndarray:
        """Boolean grid of voxels covered by at least one patch."""
        return self.weight > 0.0

    def finalize(self) -> np.ndarray:
        """Weighted mean where covered, 0 elsewhere (float32).

        Covered voxels are clamped to the observed input value range: the
        weighted mean lies inside it mathematically, so the clamp only
        removes float roundoff drift.
        """
        out = np.zeros(self.shape, dtype=np.float64)
        covered = self.coverage
        np.divide(self.sum, self.weight, out=out, where=covered)
        if self._value_lo <= self._value_hi:
            out[covered] = np.clip(out[covered], self._value_lo, self._value_hi)
        return out.astype(np.float32)


def aggregate(
    patches: Iterable[tuple[np.ndarray, Sequence[int]]],
    shape: tuple[int, int, int],
    patch_weight: str = "uniform",
    like: Volume | None = None,
) -> Volume:
    """Reconstruct a volume from overlapping (patch, anchor) pairs.

    Output voxels are the weighted mean of every covering patch; voxels no
    patch covers are 0. ``like`` donates world geometry and the recorded
    raw range; otherwise unit spacing at the origin is used. The intensity
    domain is inferred from the aggregated values.
    """
    buffer = AggregationBuffer(shape, patch_weight)
    for patch, anchor in patches:
        buffer.add(np.asarray(patch, dtype=np.float64), anchor)
    out = buffer.finalize()
    if like is not None:
        if like.shape != tuple(shape):
            raise ValueError(f"geometry donor shape {like.shape} != {tuple(shape)}")
        return like.with_voxels(out, None)
    return Volume(voxels=out)


@dataclass(frozen=True)
class BoostWeightMap:
    """Per-voxel loss weights: 1 outside the mask, 1 + lambda inside."""

    weights: np.ndarray
    lambda_boost: float

    def __post_init__(self) -> None:
        weights = np.asarray(self.weights, dtype=np.float32)
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)


def make_boost_weights(mask: Volume, lambda_boost: float) -> BoostWeightMap:
    """Gradient-boost weight map from a binary mask: 1 + lambda * mask."""
    if lambda_boost < 0:
        raise ValueError(f"lambda_boost must be >= 0, got {lambda_boost}")
    if mask.intensity_domain is not IntensityDomain.MASK:
        raise ValueError("boost weights need a mask volume")
    weights = 1.0 + lambda_boost * mask.voxels.astype(np.float64)
    return BoostWeightMap(weights=weights.astype(np.float32), lambda_boost=float(lambda_boost))
