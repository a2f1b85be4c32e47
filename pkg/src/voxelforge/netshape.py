"""Layer output-shape inference and architecture-table verification.

Tables describe each network as an ordered list of layers with their
declared output shapes. Layers whose padding is unknown are marked
``infer``; verification searches {same, valid} per row and reports the
assignment that reproduces the declared shape, or flags the row.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from importlib import resources

__all__ = [
    "LayerKind",
    "Padding",
    "RowStatus",
    "NonPositiveOutput",
    "LayerSpec",
    "ShapeTable",
    "RowResult",
    "TableReport",
    "infer_shape",
    "verify_table",
    "load_builtin_tables",
]


class LayerKind(enum.Enum):
    INPUT = "input"
    CONVOLUTION = "convolution"
    DECONVOLUTION = "deconvolution"
    MAX_POOLING = "max_pooling"
    DENSE = "dense"
    OUTPUT = "output"


class Padding(enum.Enum):
    SAME = "same"
    VALID = "valid"
    INFER = "infer"


class RowStatus(enum.Enum):
    MATCH = "match"
    MISMATCH = "mismatch"          # no padding assignment reproduces the row
    UNRESOLVABLE = "unresolvable"  # declared shape change has no mechanism


class NonPositiveOutput(ValueError):
    """A layer would produce an empty spatial extent."""


@dataclass(frozen=True)
class LayerSpec:
    """One network layer: kind, kernel/stride geometry and feature count."""

    kind: LayerKind
    kernel: tuple[int, ...] | None = None
    strides: tuple[int, ...] | None = None
    padding: Padding = Padding.INFER
    features: int | None = None

    def __post_init__(self) -> None:
        if self.kernel is not None and any(k <= 0 for k in self.kernel):
            raise ValueError(f"kernel extents must be positive, got {self.kernel}")
        if self.strides is not None and any(s <= 0 for s in self.strides):
            raise ValueError(f"strides must be positive, got {self.strides}")


@dataclass(frozen=True)
class ShapeTable:
    """Declared architecture: (layer, expected output shape) rows."""

    name: str
    rows: tuple[tuple[LayerSpec, tuple[int, ...]], ...]

    def __post_init__(self) -> None:
        if not self.rows:
            raise ValueError("a shape table needs at least one row")
        if self.rows[0][0].kind is not LayerKind.INPUT:
            raise ValueError(f"{self.name}: first row must be an input layer")
        if self.rows[-1][0].kind is not LayerKind.OUTPUT:
            raise ValueError(f"{self.name}: last row must be an output layer")
        for spec, shape in self.rows:
            if any(s <= 0 for s in shape):
                raise ValueError(f"{self.name}: declared shapes must be positive")


def _spatial_out(extent: int, kernel: int, stride: int, padding: Padding) -> int:
    if padding is Padding.SAME:
        return math.ceil(extent / stride)
    return (extent - kernel) // stride + 1


def infer_shape(
    layer: LayerSpec, in_shape: tuple[int, ...], padding: Padding | None = None
) -> tuple[int, ...]:
    """Output shape of ``layer`` applied to ``in_shape`` = (*spatial, channels).

    ``padding`` overrides the layer's own setting; it must be concrete
    (same or valid) for convolution and pooling layers.
    """
    if any(s <= 0 for s in in_shape):
        raise NonPositiveOutput(f"input shape must be positive, got {in_shape}")
    pad = padding if padding is not None else layer.padding
    kind = layer.kind

    if kind in (LayerKind.INPUT, LayerKind.OUTPUT):
        return tuple(in_shape)
    if kind is LayerKind.DENSE:
        if layer.features is None:
            raise ValueError("dense layers need a unit count")
        return tuple(in_shape[:-1]) + (layer.features,)

    if layer.kernel is None or layer.strides is None:
        raise ValueError(f"{kind.value} layers need kernel and strides")
    if pad is Padding.INFER:
        raise ValueError("padding must be resolved to same/valid before inference")

    spatial = in_shape[:-1]
    if len(layer.kernel) != len(spatial) or len(layer.strides) != len(spatial):
        raise ValueError(
            f"kernel/strides rank {len(layer.kernel)} does not match "
            f"spatial rank {len(spatial)}"
        )

    out: list[int] = []
    for extent, kernel, stride in zip(spatial, layer.kernel, layer.strides):
        if kind is LayerKind.DECONVOLUTION:
            value = extent * stride if pad is Padding.SAME else (extent - 1) * stride + kernel
        else:  # convolution and max pooling share the sliding-window rule
            value = _spatial_out(extent, kernel, stride, pad)
        if value <= 0:
            raise NonPositiveOutput(
                f"{kind.value} with kernel {kernel} over extent {extent} "
                f"yields non-positive output"
            )
        out.append(value)

    channels = in_shape[-1] if kind is LayerKind.MAX_POOLING else layer.features
    if channels is None:
        raise ValueError(f"{kind.value} layers need a feature count")
    return tuple(out) + (channels,)


@dataclass(frozen=True)
class RowResult:
    index: int
    layer: LayerSpec
    expected: tuple[int, ...]
    computed: tuple[int, ...] | None
    padding: Padding | None
    status: RowStatus

    def describe(self) -> str:
        kind = self.layer.kind.value
        if self.status is RowStatus.MATCH:
            pad = f" [{self.padding.value}]" if self.padding else ""
            return f"row {self.index:2d} {kind:13s} -> {'x'.join(map(str, self.expected))}{pad}: match"
        detail = "x".join(map(str, self.computed)) if self.computed else "n/a"
        return (
            f"row {self.index:2d} {kind:13s} -> declared "
            f"{'x'.join(map(str, self.expected))}, computed {detail}: {self.status.value}"
        )


@dataclass(frozen=True)
class TableReport:
    name: str
    rows: tuple[RowResult, ...]

    @property
    def matched(self) -> bool:
        return all(r.status is RowStatus.MATCH for r in self.rows)

    @property
    def flagged(self) -> tuple[RowResult, ...]:
        return tuple(r for r in self.rows if r.status is not RowStatus.MATCH)

    @property
    def final_shape(self) -> tuple[int, ...]:
        return self.rows[-1].expected

    def render(self) -> str:
        header = f"{self.name}: {'all rows match' if self.matched else f'{len(self.flagged)} flagged row(s)'}"
        return "\n".join([header] + ["  " + r.describe() for r in self.rows])


_SEARCH_ORDER = (Padding.SAME, Padding.VALID)


def _candidate_paddings(layer: LayerSpec) -> tuple[Padding, ...]:
    if layer.padding is Padding.INFER:
        return _SEARCH_ORDER
    return (layer.padding,)


def verify_table(table: ShapeTable) -> TableReport:
    """Check every row's declared output shape against the inference rules.

    Rows continue from the *declared* shape of their predecessor, so one
    inconsistent row cannot cascade. Dense rows are opaque in their spatial
    extents: a spatial change declared across a dense layer is reported as
    unresolvable rather than mismatching under some padding.
    """
    results: list[RowResult] = []
    current = table.rows[0][1]
    for index, (layer, expected) in enumerate(table.rows):
        if layer.kind is LayerKind.INPUT:
            results.append(
                RowResult(index, layer, expected, expected, None, RowStatus.MATCH)
            )
            current = expected
            continue

        if layer.kind in (LayerKind.DENSE, LayerKind.OUTPUT):
            # nothing to search; either the row follows or it has no mechanism
            computed = infer_shape(layer, current)
            status = RowStatus.MATCH if computed == expected else RowStatus.UNRESOLVABLE
            results.append(RowResult(index, layer, expected, computed, None, status))
            current = expected
            continue

        chosen = None
        fallback = None
        for pad in _candidate_paddings(layer):
            try:
                computed = infer_shape(layer, current, padding=pad)
            except NonPositiveOutput:
                continue
            if fallback is None:
                fallback = (pad, computed)
            if computed == expected:
                chosen = (pad, computed)
                break

        if chosen is not None:
            results.append(
                RowResult(index, layer, expected, chosen[1], chosen[0], RowStatus.MATCH)
            )
        elif fallback is not None:
            results.append(
                RowResult(index, layer, expected, fallback[1], fallback[0], RowStatus.MISMATCH)
            )
        else:
            results.append(
                RowResult(index, layer, expected, None, None, RowStatus.MISMATCH)
            )
        current = expected  # continue from the table's declaration
    return TableReport(name=table.name, rows=tuple(results))


def _parse_row(row: dict) -> tuple[LayerSpec, tuple[int, ...]]:
    kind = LayerKind(row["type"])
    expected = tuple(int(v) for v in row["output_shape"])
    kernel = row.get("kernel")
    strides = row.get("strides")
    spatial_rank = len(expected) - 1
    if kernel is not None:
        kernel = tuple(int(k) for k in (kernel if isinstance(kernel, list) else [kernel] * spatial_rank))
    if strides is not None:
        strides = tuple(int(s) for s in (strides if isinstance(strides, list) else [strides] * spatial_rank))
    features: int | None = None
    if kind in (LayerKind.CONVOLUTION, LayerKind.DECONVOLUTION, LayerKind.DENSE):
        features = int(row.get("features", expected[-1]))
    spec = LayerSpec(kind=kind, kernel=kernel, strides=strides, features=features)
    return spec, expected


def load_builtin_tables() -> dict[str, ShapeTable]:
    """Load the architecture tables bundled with the package."""
    text = resources.files("voxelforge.data").joinpath("architecture_tables.json").read_text()
    raw = json.loads(text)
    tables: dict[str, ShapeTable] = {}
    for name, body in raw.items():
        rows = tuple(_parse_row(row) for row in body["rows"])
        tables[name] = ShapeTable(name=name, rows=rows)
    return tables
