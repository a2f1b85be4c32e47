"""Distance losses, adversarial loss forms, and volume evaluation metrics.

All reductions accumulate in float64 with numpy's deterministic pairwise
summation, so results are reproducible bit-for-bit across runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .volume import RAW16_MAX, IntensityDomain, Volume

__all__ = [
    "ShapeMismatch",
    "DomainError",
    "InfinitePsnr",
    "LossWeights",
    "mae",
    "mse",
    "spatial_gradient",
    "gdl",
    "combined_loss",
    "adversarial_minmax",
    "adversarial_lsq",
    "psnr",
    "EvalReport",
    "VolumeMetrics",
    "evaluate",
    "evaluate_pairs",
]


class ShapeMismatch(ValueError):
    """Operands do not share a common grid shape."""


class DomainError(ValueError):
    """Operand values fall outside the mathematical domain (log of <= 0)."""


class InfinitePsnr(ArithmeticError):
    """PSNR is unbounded because the mean squared error is zero."""


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined training objective's terms."""

    lambda_mae: float = 1.0
    lambda_mse: float = 0.0
    lambda_gdl: float = 0.0
    lambda_adv: float = 0.0

    def __post_init__(self) -> None:
        for name in ("lambda_mae", "lambda_mse", "lambda_gdl", "lambda_adv"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"grids differ in shape: {x.shape} vs {y.shape}")
    if x.size == 0:
        raise ShapeMismatch("grids must contain at least one element")
    return x, y


def mae(x, y) -> float:
    """Mean absolute error, (1/N) * sum |x_i - y_i|."""
    x, y = _pair(x, y)
    return float(np.mean(np.abs(x - y)))


def mse(x, y) -> float:
    """Mean squared error, (1/N) * sum (x_i - y_i)^2."""
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def spatial_gradient(x, axis: int = 0, strict_boundary: bool = True) -> np.ndarray:
    """Backward-looking difference g_i = x_i - x_{i+1} along ``axis``.

    With ``strict_boundary`` (the default) both the first and the last
    element along the axis are zero, i.e. differences are formed only at
    interior positions. Setting it False keeps the difference at the first
    element as well, the usual forward-difference convention.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    n = x.shape[axis]
    if n < 2:
        return grad
    head = [slice(None)] * x.ndim
    tail = [slice(None)] * x.ndim
    start = 1 if strict_boundary else 0
    head[axis] = slice(start, n - 1)
    tail[axis] = slice(start + 1, n)
    out = [slice(None)] * x.ndim
    out[axis] = slice(start, n - 1)
    grad[tuple(out)] = x[tuple(head)] - x[tuple(tail)]
    return grad


def gdl(x, y, strict_boundary: bool = True) -> float:
    """Gradient difference loss: mean over axes of mse(grad x, grad y)."""
    x, y = _pair(x, y)
    total = 0.0
    for axis in range(x.ndim):
        total += mse(
            spatial_gradient(x, axis, strict_boundary),
            spatial_gradient(y, axis, strict_boundary),
        )
    return total / x.ndim


def combined_loss(x, y, weights: LossWeights) -> float:
    """Weighted sum lambda_mae*mae + lambda_mse*mse + lambda_gdl*gdl."""
    x, y = _pair(x, y)
    total = 0.0
    if weights.lambda_mae:
        total += weights.lambda_mae * mae(x, y)
    if weights.lambda_mse:
        total += weights.lambda_mse * mse(x, y)
    if weights.lambda_gdl:
        total += weights.lambda_gdl * gdl(x, y)
    return total


def adversarial_minmax(d_real, d_fake) -> float:
    """Discriminator objective mean ln(d_real) + mean ln(1 - d_fake).

    Score maps are reduced by arithmetic mean. Raises :class:`DomainError`
    when a logarithm argument is not strictly positive.
    """
    d_real = np.asarray(d_real, dtype=np.float64)
    d_fake = np.asarray(d_fake, dtype=np.float64)
    if d_real.min() <= 0.0:
        raise DomainError("d_real scores must be > 0 for the log term")
    if d_fake.max() >= 1.0:
        raise DomainError("d_fake scores must be < 1 for the log term")
    return float(np.mean(np.log(d_real)) + np.mean(np.log1p(-d_fake)))


def adversarial_lsq(d_real, d_fake, form: str = "standard") -> float:
    """Least-squares adversarial loss.

    ``standard`` is the usual least-squares discriminator objective
    mean (d_real - 1)^2 + mean d_fake^2. ``log_squares`` evaluates
    mean ln(d_real^2) + mean ln((1 - d_fake)^2) instead, a variant that
    keeps the logarithms but squares their arguments; it shares the
    optimum at d_real = 1, d_fake = 0.
    """
    d_real = np.asarray(d_real, dtype=np.float64)
    d_fake = np.asarray(d_fake, dtype=np.float64)
    if form == "standard":
        return float(np.mean((d_real - 1.0) ** 2) + np.mean(d_fake**2))
    if form == "log_squares":
        if np.any(d_real == 0.0):
            raise DomainError("d_real scores must be nonzero for the log term")
        if np.any(d_fake == 1.0):
            raise DomainError("d_fake scores must differ from 1 for the log term")
        return float(np.mean(np.log(d_real**2)) + np.mean(np.log((1.0 - d_fake) ** 2)))
    raise ValueError(f"form must be 'standard' or 'log_squares', got {form!r}")


def psnr(x, y, max_value: float = RAW16_MAX) -> float:
    """Peak signal-to-noise ratio 10*log10(M^2 / mse) in dB.

    Raises :class:`InfinitePsnr` when the grids are identical.
    """
    err = mse(x, y)
    if err == 0.0:
        raise InfinitePsnr("mse is zero; PSNR is unbounded")
    return 10.0 * math.log10(max_value * max_value / err)


# -- volume evaluation ---------------------------------------------------------


def _raw_scale(v: Volume, fallback_range: tuple[float, float] | None) -> np.ndarray:
    """Voxels restored to raw intensity scale when a recorded range exists."""
    vox = v.voxels.astype(np.float64)
    if v.intensity_domain is IntensityDomain.UNIT:
        rng = v.raw_range if v.raw_range is not None else fallback_range
        if rng is not None:
            lo, hi = rng
            return vox * (hi - lo) + lo
    return vox


@dataclass(frozen=True)
class VolumeMetrics:
    """Per-volume distance metrics at raw intensity scale."""

    subject: str
    mae: float
    mse: float
    psnr: float  # math.inf when mse == 0
    voxels: int

    @property
    def infinite_psnr(self) -> bool:
        return math.isinf(self.psnr)


@dataclass(frozen=True)
class EvalReport:
    """Distance metrics per volume plus voxel-weighted aggregates.

    The aggregate PSNR is reported two ways: recomputed from the pooled
    mean squared error, and as the plain mean of the per-volume values.
    The two differ in general because the logarithm does not commute with
    averaging, so both are kept.
    """

    volumes: tuple[VolumeMetrics, ...]
    max_value: float = RAW16_MAX

    @property
    def total_voxels(self) -> int:
        return sum(v.voxels for v in self.volumes)

    @property
    def aggregate_mae(self) -> float:
        return sum(v.mae * v.voxels for v in self.volumes) / self.total_voxels

    @property
    def aggregate_mse(self) -> float:
        return sum(v.mse * v.voxels for v in self.volumes) / self.total_voxels

    @property
    def psnr_of_aggregate_mse(self) -> float:
        agg = self.aggregate_mse
        if agg == 0.0:
            return math.inf
        return 10.0 * math.log10(self.max_value**2 / agg)

    @property
    def mean_volume_psnr(self) -> float:
        return sum(v.psnr for v in self.volumes) / len(self.volumes)

    def to_dict(self) -> dict:
        return {
            "volumes": [
                {
                    "subject": v.subject,
                    "mae": v.mae,
                    "mse": v.mse,
                    "psnr": None if v.infinite_psnr else v.psnr,
                    "infinite_psnr": v.infinite_psnr,
                    "voxels": v.voxels,
                }
                for v in self.volumes
            ],
            "aggregate": {
                "mae": self.aggregate_mae,
                "mse": self.aggregate_mse,
                "psnr_of_aggregate_mse": (
                    None if math.isinf(self.psnr_of_aggregate_mse) else self.psnr_of_aggregate_mse
                ),
                "mean_volume_psnr": (
                    None if math.isinf(self.mean_volume_psnr) else self.mean_volume_psnr
                ),
                "voxels": self.total_voxels,
                "volume_count": len(self.volumes),
            },
            "max_value": self.max_value,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        def fmt(value: float) -> str:
            return "inf" if math.isinf(value) else f"{value:.4g}"

        rows = [("Subject", "MAE", "MSE", "PSNR")]
        for v in self.volumes:
            rows.append((v.subject, fmt(v.mae), fmt(v.mse), fmt(v.psnr)))
        rows.append(
            (
                "aggregate",
                fmt(self.aggregate_mae),
                fmt(self.aggregate_mse),
                f"{fmt(self.psnr_of_aggregate_mse)} (pooled) / "
                f"{fmt(self.mean_volume_psnr)} (mean)",
            )
        )
        widths = [max(len(row[i]) for row in rows) for i in range(4)]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
                 for row in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def _volume_metrics(
    pred: Volume, truth: Volume, subject: str, max_value: float
) -> VolumeMetrics:
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"{subject}: grids differ: {pred.shape} vs {truth.shape}")
    truth_raw = _raw_scale(truth, None)
    pred_raw = _raw_scale(pred, truth.raw_range)
    err_mae = mae(pred_raw, truth_raw)
    err_mse = mse(pred_raw, truth_raw)
    value = math.inf
    if err_mse > 0.0:
        value = 10.0 * math.log10(max_value * max_value / err_mse)
    return VolumeMetrics(
        subject=subject, mae=err_mae, mse=err_mse, psnr=value, voxels=pred.voxels.size
    )


def evaluate(
    pred: Volume, truth: Volume, subject: str = "volume", max_value: float = RAW16_MAX
) -> EvalReport:
    """Evaluate one predicted volume against its ground truth.

    Unit-domain volumes are restored to raw scale through their recorded
    (min, max) before metric computation; a prediction without its own
    recorded range inherits the truth volume's.
    """
    return EvalReport(volumes=(_volume_metrics(pred, truth, subject, max_value),),
                      max_value=max_value)


def evaluate_pairs(
    pairs: Sequence[tuple[Volume, Volume]],
    subjects: Sequence[str] | None = None,
    max_value: float = RAW16_MAX,
) -> EvalReport:
    """Evaluate several (pred, truth) pairs into one aggregate report."""
    if not pairs:
        raise ValueError("evaluate_pairs needs at least one pair")
    if subjects is None:
        subjects = [f"volume-{i}" for i in range(len(pairs))]
    metrics = tuple(
        _volume_metrics(pred, truth, subject, max_value)
        for (pred, truth), subject in zip(pairs, subjects)
    )
    return EvalReport(volumes=metrics, max_value=max_value)
