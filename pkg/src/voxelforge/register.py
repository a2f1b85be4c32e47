"""Rigid multi-modal coregistration by mutual-information maximization.

The optimizer is a multi-resolution, derivative-free regular-step search:
at each pyramid level it sweeps the six rigid parameters (three Euler
angles, three translations) with symmetric trial steps, greedily accepts
the best improving move, and halves the step whenever no move improves the
metric, until the step drops below the convergence tolerance. Rotations
are scaled by half the volume diagonal so one step unit moves comparable
voxel distances for every parameter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .volume import IntensityDomain, Volume

__all__ = [
    "DegenerateIntensity",
    "RigidTransform",
    "JointHistogram",
    "RegistrationConfig",
    "RegistrationResult",
    "TraceEntry",
    "euler_matrix",
    "matrix_to_euler",
    "trilinear_sample",
    "resample",
    "joint_histogram",
    "mutual_information",
    "downsample2x",
    "register",
    "save_transform",
    "load_transform",
]


class DegenerateIntensity(ValueError):
    """A volume is constant, so its intensity distribution carries no information."""


# -- rigid transforms ----------------------------------------------------------


def euler_matrix(angles) -> np.ndarray:
    """Rotation matrix for Euler angles (rx, ry, rz), x applied first."""
    rx, ry, rz = (float(a) for a in angles)
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def matrix_to_euler(rotation: np.ndarray) -> tuple[float, float, float]:
    """Invert :func:`euler_matrix`; at gimbal lock (|cos ry| = 0) rz is set to 0."""
    ry = math.asin(max(-1.0, min(1.0, -float(rotation[2, 0]))))
    if abs(math.cos(ry)) > 1e-9:
        rx = math.atan2(float(rotation[2, 1]), float(rotation[2, 2]))
        rz = math.atan2(float(rotation[1, 0]), float(rotation[0, 0]))
    else:
        rx = math.atan2(-float(rotation[1, 2]), float(rotation[1, 1]))
        rz = 0.0
    return rx, ry, rz


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion mapping fixed-space points to moving-space points.

    ``p_moving = R (p_fixed - center) + center + translation`` where R is
    the Euler rotation about x, then y, then z.
    """

    angles: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(center=tuple(center))

    @property
    def rotation(self) -> np.ndarray:
        return euler_matrix(self.angles)

    @property
    def offset(self) -> np.ndarray:
        """o such that the map is p -> R p + o."""
        centre = np.asarray(self.center)
        return centre + np.asarray(self.translation) - self.rotation @ centre

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map world points, shape (..., 3)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.offset

    @classmethod
    def from_matrix(cls, rotation: np.ndarray, offset: np.ndarray, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        centre = np.asarray(center, dtype=float)
        translation = np.asarray(offset, dtype=float) + rotation @ centre - centre
        return cls(
            angles=matrix_to_euler(rotation),
            translation=tuple(translation),
            center=tuple(centre),
        )

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """Transform applying ``inner`` first, then this one."""
        rotation = self.rotation @ inner.rotation
        offset = self.rotation @ inner.offset + self.offset
        return RigidTransform.from_matrix(rotation, offset, self.center)

    def inverse(self) -> "RigidTransform":
        rotation = self.rotation.T
        offset = -rotation @ self.offset
        return RigidTransform.from_matrix(rotation, offset, self.center)


def save_transform(t: RigidTransform, path: str | Path) -> None:
    """Serialize to the JSON interchange record."""
    record = {
        "angles_rad": list(t.angles),
        "translation_mm": list(t.translation),
        "center_mm": list(t.center),
    }
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def load_transform(path: str | Path) -> RigidTransform:
    record = json.loads(Path(path).read_text())
    return RigidTransform(
        angles=tuple(record["angles_rad"]),
        translation=tuple(record["translation_mm"]),
        center=tuple(record["center_mm"]),
    )


# -- resampling ------------------------------------------------------------------


def trilinear_sample(voxels: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation at fractional (depth, height, width) indices.

    Points outside the valid interpolation domain [0, n-1] per axis
    evaluate to 0.
    """
    pts = np.asarray(points, dtype=np.float64)
    shape = voxels.shape
    valid = np.ones(pts.shape[:-1], dtype=bool)
    for axis in range(3):
        valid &= (pts[..., axis] >= 0.0) & (pts[..., axis] <= shape[axis] - 1)

    lo = np.floor(pts).astype(np.int64)
    for axis in range(3):
        np.clip(lo[..., axis], 0, shape[axis] - 1, out=lo[..., axis])
    hi = np.minimum(lo + 1, np.array(shape) - 1)
    frac = pts - lo

    d0, h0, w0 = lo[..., 0], lo[..., 1], lo[..., 2]
    d1, h1, w1 = hi[..., 0], hi[..., 1], hi[..., 2]
    fd, fh, fw = frac[..., 0], frac[..., 1], frac[..., 2]

    v = voxels.astype(np.float64, copy=False)
    c00 = v[d0, h0, w0] * (1 - fw) + v[d0, h0, w1] * fw
    c01 = v[d0, h1, w0] * (1 - fw) + v[d0, h1, w1] * fw
    c10 = v[d1, h0, w0] * (1 - fw) + v[d1, h0, w1] * fw
    c11 = v[d1, h1, w0] * (1 - fw) + v[d1, h1, w1] * fw
    c0 = c00 * (1 - fh) + c01 * fh
    c1 = c10 * (1 - fh) + c11 * fh
    out = c0 * (1 - fd) + c1 * fd
    out[~valid] = 0.0
    return out


def _reference_world_points(reference: Volume) -> np.ndarray:
    idx = np.indices(reference.shape, dtype=np.float64)
    idx = np.stack([idx[0].ravel(), idx[1].ravel(), idx[2].ravel()], axis=-1)
    return reference.index_to_world(idx)


def resample(moving: Volume, transform: RigidTransform, reference: Volume) -> Volume:
    """Resample ``moving`` onto the reference grid under the transform.

    Each reference voxel's world point is pushed through the transform and
    the moving volume is interpolated trilinearly there; points landing
    outside the moving volume contribute 0.
    """
    world = _reference_world_points(reference)
    moved_idx = moving.world_to_index(transform.apply(world))
    values = trilinear_sample(moving.voxels, moved_idx).reshape(reference.shape)

    if moving.intensity_domain is IntensityDomain.RAW16:
        out = np.clip(values, 0.0, 65535.0).astype(np.float32)
        domain = IntensityDomain.RAW16
    else:
        out = np.clip(values, 0.0, 1.0).astype(np.float32)
        domain = IntensityDomain.UNIT
    return Volume(
        voxels=out,
        spacing=reference.spacing,
        origin=reference.origin,
        direction=reference.direction,
        intensity_domain=domain,
        raw_range=moving.raw_range,
    )


# -- mutual information -----------------------------------------------------------


@dataclass(frozen=True)
class JointHistogram:
    """Joint intensity histogram with its bin edges and sample count."""

    counts: np.ndarray  # (bins, bins) float64
    edges_fixed: np.ndarray
    edges_moving: np.ndarray

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    @property
    def bins(self) -> int:
        return self.counts.shape[0]

    def marginal_fixed(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def marginal_moving(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    @staticmethod
    def _entropy(counts: np.ndarray, total: float) -> float:
        p = counts[counts > 0] / total
        return float(-np.sum(p * np.log(p)))

    def entropy_fixed(self) -> float:
        return self._entropy(self.marginal_fixed(), self.total)

    def entropy_moving(self) -> float:
        return self._entropy(self.marginal_moving(), self.total)

    def mutual_information(self) -> float:
        total = self.total
        joint = self.counts / total
        pf = joint.sum(axis=1)
        pm = joint.sum(axis=0)
        outer = pf[:, None] * pm[None, :]
        nonzero = joint > 0
        mi = float(np.sum(joint[nonzero] * np.log(joint[nonzero] / outer[nonzero])))
        return max(mi, 0.0)  # clamp float roundoff on independent inputs


def _bin_edges(lo: float, hi: float, bins: int) -> np.ndarray:
    return np.linspace(lo, hi, bins + 1)


def _bin_indices(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    scaled = (values - lo) * (bins / (hi - lo))
    return np.clip(scaled.astype(np.int64), 0, bins - 1)


def _intensity_range(v: Volume) -> tuple[float, float]:
    lo = float(v.voxels.min())
    hi = float(v.voxels.max())
    if hi <= lo:
        raise DegenerateIntensity("volume is constant; intensity histogram is degenerate")
    return lo, hi


def joint_histogram(fixed: Volume, moved: Volume, bins: int = 64) -> JointHistogram:
    """Joint histogram of two volumes sharing one grid, min-max binned."""
    if fixed.shape != moved.shape:
        raise ValueError(f"grids differ: {fixed.shape} vs {moved.shape}")
    flo, fhi = _intensity_range(fixed)
    mlo, mhi = _intensity_range(moved)
    fi = _bin_indices(fixed.voxels.astype(np.float64).ravel(), flo, fhi, bins)
    mi = _bin_indices(moved.voxels.astype(np.float64).ravel(), mlo, mhi, bins)
    counts = np.bincount(fi * bins + mi, minlength=bins * bins).astype(np.float64)
    return JointHistogram(
        counts=counts.reshape(bins, bins),
        edges_fixed=_bin_edges(flo, fhi, bins),
        edges_moving=_bin_edges(mlo, mhi, bins),
    )


def mutual_information(fixed: Volume, moved: Volume, bins: int = 64) -> float:
    """Mutual information in nats between two volumes on one grid."""
    return joint_histogram(fixed, moved, bins).mutual_information()


# -- multi-resolution pyramid -------------------------------------------------------


def downsample2x(v: Volume) -> Volume:
    """Halve each axis by 2x2x2 mean pooling (axes of extent 1 are kept).

    Spacing doubles and the origin moves to the centre of the first pooled
    block, so world geometry stays consistent across pyramid levels.
    """
    vox = v.voxels.astype(np.float64)
    spacing = list(v.spacing)
    shift_dhw = np.zeros(3)
    for axis in range(3):
        n = vox.shape[axis]
        if n < 2:
            continue
        pairs = n // 2
        sl = [slice(None)] * 3
        sl[axis] = slice(0, pairs * 2)
        vox = vox[tuple(sl)]
        new_shape = list(vox.shape)
        new_shape[axis] = pairs
        new_shape.insert(axis + 1, 2)
        vox = vox.reshape(new_shape).mean(axis=axis + 1)
        spacing[axis] *= 2.0
        shift_dhw[axis] = 0.5 * v.spacing[axis]
    origin = v.origin + v.direction @ (shift_dhw[::-1])
    domain = (
        IntensityDomain.UNIT
        if v.intensity_domain in (IntensityDomain.UNIT, IntensityDomain.MASK)
        else IntensityDomain.RAW16
    )
    return Volume(
        voxels=np.clip(vox, 0.0, None).astype(np.float32),
        spacing=tuple(spacing),
        origin=origin,
        direction=v.direction,
        intensity_domain=domain,
        raw_range=v.raw_range,
    )


# -- registration -----------------------------------------------------------------


@dataclass(frozen=True)
class RegistrationConfig:
    """Optimizer settings for :func:`register`.

    ``convergence_tol`` is dimensionless: the search stops once the trial
    step falls below this fraction of the level's smallest voxel spacing.
    ``sampling_fraction`` subsamples the fixed grid deterministically for
    the metric evaluation.
    """

    bins: int = 64
    max_iterations: int = 200
    convergence_tol: float = 0.01
    pyramid_levels: int = 3
    sampling_fraction: float = 1.0

    def __post_init__(self) -> None:
        if self.bins < 8:
            raise ValueError(f"bins must be >= 8, got {self.bins}")
        if self.pyramid_levels < 1:
            raise ValueError(f"pyramid_levels must be >= 1, got {self.pyramid_levels}")
        if not 0.0 < self.sampling_fraction <= 1.0:
            raise ValueError("sampling_fraction must lie in (0, 1]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be positive")


class TraceEntry(NamedTuple):
    iteration: int
    mi: float
    level: int


@dataclass(frozen=True)
class RegistrationResult:
    """Transform found by the optimizer plus its acceptance trace.

    ``improved`` is False when not a single step improved the metric at
    the coarsest level; the transform is then the identity and should be
    treated with suspicion unless the volumes started out aligned.
    """

    transform: RigidTransform
    trace: tuple[TraceEntry, ...]
    improved: bool


_INITIAL_STEP_VOXELS = 2.0
_SAMPLING_SEED = 0x5EED


class _LevelMetric:
    """Mutual information of (fixed, moving-at-transform) on one pyramid level."""

    def __init__(self, fixed: Volume, moving: Volume, cfg: RegistrationConfig, level: int):
        points = _reference_world_points(fixed)
        intensities = fixed.voxels.astype(np.float64).ravel()
        if cfg.sampling_fraction < 1.0:
            rng = np.random.default_rng(_SAMPLING_SEED + level)
            count = max(1, int(round(points.shape[0] * cfg.sampling_fraction)))
            chosen = rng.choice(points.shape[0], size=count, replace=False)
            chosen.sort()
            points = points[chosen]
            intensities = intensities[chosen]
        flo = float(intensities.min())
        fhi = float(intensities.max())
        if fhi <= flo:
            raise DegenerateIntensity("fixed volume is constant at this pyramid level")
        mlo = float(moving.voxels.min())
        mhi = float(moving.voxels.max())
        if mhi <= mlo:
            raise DegenerateIntensity("moving volume is constant at this pyramid level")

        self.bins = cfg.bins
        self.points = points
        self.fixed_bins = _bin_indices(intensities, flo, fhi, cfg.bins) * cfg.bins
        self.moving = moving
        self.moving_range = (mlo, mhi)

    def __call__(self, transform: RigidTransform) -> float:
        moved_idx = self.moving.world_to_index(transform.apply(self.points))
        values = trilinear_sample(self.moving.voxels, moved_idx)
        mlo, mhi = self.moving_range
        moving_bins = _bin_indices(values, mlo, mhi, self.bins)
        counts = np.bincount(
            self.fixed_bins + moving_bins, minlength=self.bins * self.bins
        ).astype(np.float64)
        hist = JointHistogram(
            counts=counts.reshape(self.bins, self.bins),
            edges_fixed=_bin_edges(0.0, 1.0, self.bins),
            edges_moving=_bin_edges(mlo, mhi, self.bins),
        )
        return hist.mutual_information()


def _build_pyramid(v: Volume, levels: int) -> list[Volume]:
    pyramid = [v]
    for _ in range(levels - 1):
        coarser = downsample2x(pyramid[-1])
        if min(coarser.shape) < 8 or coarser.shape == pyramid[-1].shape:
            break
        pyramid.append(coarser)
    return pyramid[::-1]  # coarsest first


def register(
    fixed: Volume, moving: Volume, cfg: RegistrationConfig | None = None
) -> RegistrationResult:
    """Find the rigid transform aligning ``moving`` to ``fixed`` by MI ascent.

    The rotation centre is the fixed volume's world centre. Out-of-bounds
    samples contribute intensity 0 and stay in the histogram.
    """
    cfg = cfg or RegistrationConfig()
    _intensity_range(fixed)
    _intensity_range(moving)

    center = fixed.world_center
    rot_scale = 0.5 * float(
        np.linalg.norm((np.array(fixed.shape) - 1) * np.array(fixed.spacing))
    )
    fixed_pyramid = _build_pyramid(fixed, cfg.pyramid_levels)
    moving_pyramid = _build_pyramid(moving, cfg.pyramid_levels)
    while len(moving_pyramid) > len(fixed_pyramid):
        moving_pyramid.pop(0)
    while len(fixed_pyramid) > len(moving_pyramid):
        fixed_pyramid.pop(0)

    params = np.zeros(6)  # (rx, ry, rz) rad, (tx, ty, tz) mm
    scales = np.array([1.0 / rot_scale] * 3 + [1.0] * 3)

    trace: list[TraceEntry] = []
    iteration = 0
    improved_at_coarsest = False

    for level, (fixed_level, moving_level) in enumerate(zip(fixed_pyramid, moving_pyramid)):
        metric = _LevelMetric(fixed_level, moving_level, cfg, level)
        min_spacing = min(fixed_level.spacing)
        step = _INITIAL_STEP_VOXELS * min_spacing
        tol = cfg.convergence_tol * min_spacing

        def transform_for(p: np.ndarray) -> RigidTransform:
            return RigidTransform(
                angles=tuple(p[:3]), translation=tuple(p[3:]), center=tuple(center)
            )

        current = metric(transform_for(params))
        trace.append(TraceEntry(iteration, current, level))

        level_iterations = 0
        while level_iterations < cfg.max_iterations and step >= tol:
            best_value = current
            best_params = None
            for index in range(6):
                for sign in (1.0, -1.0):
                    candidate = params.copy()
                    candidate[index] += sign * step * scales[index]
                    value = metric(transform_for(candidate))
                    if value > best_value:
                        best_value = value
                        best_params = candidate
            iteration += 1
            level_iterations += 1
            if best_params is None:
                step *= 0.5
            else:
                params = best_params
                current = best_value
                trace.append(TraceEntry(iteration, current, level))
                if level == 0:
                    improved_at_coarsest = True

        if level == 0 and not improved_at_coarsest:
            return RegistrationResult(
                transform=RigidTransform.identity(center=tuple(center)),
                trace=tuple(trace),
                improved=False,
            )

    return RegistrationResult(
        transform=RigidTransform(
            angles=tuple(params[:3]), translation=tuple(params[3:]), center=tuple(center)
        ),
        trace=tuple(trace),
        improved=True,
    )
