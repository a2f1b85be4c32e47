"""Bit-exact MetaImage (MHD+raw) reading and NIfTI-1 reading/writing.

MetaImage support covers the plain-text ``Key = Value`` header plus a raw
payload, either in a separate file or inline (``ElementDataFile = LOCAL``).
NIfTI-1 files are written with geometry in the sform only (sform_code 1,
qform_code 0) and the voxel payload at offset 352; ``.gz`` paths are
transparently (de)compressed with deterministic gzip framing.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .volume import Volume

__all__ = [
    "FormatError",
    "MalformedHeader",
    "UnsupportedElementType",
    "UnsupportedDatatype",
    "RawSizeMismatch",
    "MhdHeader",
    "read_mhd",
    "read_nifti",
    "write_nifti",
    "convert",
]


class FormatError(ValueError):
    """Base class for file-format violations."""


class MalformedHeader(FormatError):
    """Unparseable header: unknown key, bad arity or inconsistent fields."""


class UnsupportedElementType(FormatError):
    """MetaImage ElementType outside {MET_SHORT, MET_USHORT, MET_FLOAT}."""


class UnsupportedDatatype(FormatError):
    """NIfTI datatype code outside {4, 512, 16}."""


class RawSizeMismatch(FormatError):
    """Payload byte count disagrees with the declared dimensions."""


# -- MetaImage ---------------------------------------------------------------

_MET_DTYPES = {
    "MET_SHORT": np.dtype(np.int16),
    "MET_USHORT": np.dtype(np.uint16),
    "MET_FLOAT": np.dtype(np.float32),
}

_MHD_REQUIRED = ("NDims", "DimSize", "ElementType", "ElementDataFile")
# Optional geometry keys plus the standard MetaIO bookkeeping keys that every
# writer emits.  Anything else is rejected to surface dataset irregularities.
_MHD_KNOWN = _MHD_REQUIRED + (
    "ElementSpacing",
    "Offset",
    "TransformMatrix",
    "ElementByteOrderMSB",
    "BinaryDataByteOrderMSB",  # modern alias of ElementByteOrderMSB
    "ObjectType",
    "BinaryData",
    "CompressedData",
)


@dataclass(frozen=True)
class MhdHeader:
    """Parsed MetaImage header fields for a 3D scalar volume."""

    ndims: int
    dim_size: tuple[int, int, int]  # file order: (x, y, z) = (width, height, depth)
    element_type: str
    element_spacing: tuple[float, float, float]  # (x, y, z) mm
    offset: tuple[float, float, float]  # world mm of voxel (0, 0, 0)
    transform_matrix: np.ndarray  # 3x3; row k is the world direction of axis k
    byte_order_msb: bool
    element_data_file: str


def _parse_bool(value: str, key: str) -> bool:
    if value in ("True", "true", "1"):
        return True
    if value in ("False", "false", "0"):
        return False
    raise MalformedHeader(f"{key}: expected a boolean, got {value!r}")


def _parse_numbers(value: str, count: int, key: str, cast) -> tuple:
    parts = value.split()
    if len(parts) != count:
        raise MalformedHeader(f"{key}: expected {count} values, got {len(parts)}")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError as exc:
        raise MalformedHeader(f"{key}: {exc}") from None


def _parse_mhd_header(text: str, path: Path) -> MhdHeader:
    fields: dict[str, str] = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line:
            continue
        if "=" not in line:
            raise MalformedHeader(f"{path}:{lineno}: expected 'Key = Value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _MHD_KNOWN:
            raise MalformedHeader(f"{path}:{lineno}: unknown key {key!r}")
        if key in fields:
            raise MalformedHeader(f"{path}:{lineno}: duplicate key {key!r}")
        fields[key] = value
        if key == "ElementDataFile":
            break  # ElementDataFile terminates the header; LOCAL data follows

    for key in _MHD_REQUIRED:
        if key not in fields:
            raise MalformedHeader(f"{path}: missing required key {key!r}")

    if fields.get("ObjectType", "Image") != "Image":
        raise MalformedHeader(f"{path}: ObjectType must be Image")
    if not _parse_bool(fields.get("BinaryData", "True"), "BinaryData"):
        raise MalformedHeader(f"{path}: ASCII MetaImage data is not supported")
    if _parse_bool(fields.get("CompressedData", "False"), "CompressedData"):
        raise MalformedHeader(f"{path}: compressed MetaImage data is not supported")

    ndims = int(_parse_numbers(fields["NDims"], 1, "NDims", int)[0])
    if ndims != 3:
        raise MalformedHeader(f"{path}: NDims must be 3, got {ndims}")

    dim_size = _parse_numbers(fields["DimSize"], 3, "DimSize", int)
    if any(d <= 0 for d in dim_size):
        raise MalformedHeader(f"{path}: DimSize must be positive, got {dim_size}")

    element_type = fields["ElementType"]
    if element_type not in _MET_DTYPES:
        raise UnsupportedElementType(f"{path}: unsupported ElementType {element_type!r}")

    spacing = (
        _parse_numbers(fields["ElementSpacing"], 3, "ElementSpacing", float)
        if "ElementSpacing" in fields
        else (1.0, 1.0, 1.0)
    )
    if any(s <= 0 for s in spacing):
        raise MalformedHeader(f"{path}: ElementSpacing must be positive")

    offset = (
        _parse_numbers(fields["Offset"], 3, "Offset", float)
        if "Offset" in fields
        else (0.0, 0.0, 0.0)
    )

    if "TransformMatrix" in fields:
        values = _parse_numbers(fields["TransformMatrix"], 9, "TransformMatrix", float)
        matrix = np.array(values, dtype=float).reshape(3, 3)
    else:
        matrix = np.eye(3)

    if "ElementByteOrderMSB" in fields and "BinaryDataByteOrderMSB" in fields:
        raise MalformedHeader(f"{path}: byte order specified twice")
    msb_value = fields.get("ElementByteOrderMSB", fields.get("BinaryDataByteOrderMSB", "False"))
    byte_order_msb = _parse_bool(msb_value, "ElementByteOrderMSB")

    return MhdHeader(
        ndims=ndims,
        dim_size=dim_size,
        element_type=element_type,
        element_spacing=spacing,
        offset=offset,
        transform_matrix=matrix,
        byte_order_msb=byte_order_msb,
        element_data_file=fields["ElementDataFile"],
    )


def _volume_from_payload(header: MhdHeader, payload: bytes, path: Path) -> Volume:
    dtype = _MET_DTYPES[header.element_type]
    expected = int(np.prod(header.dim_size)) * dtype.itemsize
    if len(payload) != expected:
        raise RawSizeMismatch(
            f"{path}: raw payload is {len(payload)} bytes, expected {expected}"
        )
    dtype = dtype.newbyteorder(">" if header.byte_order_msb else "<")
    flat = np.frombuffer(payload, dtype=dtype)
    width, height, depth = header.dim_size
    # payload is x-fastest, so a C-order reshape lands on (depth, height, width)
    voxels = flat.reshape(depth, height, width).astype(flat.dtype.newbyteorder("="))

    if voxels.dtype == np.int16:
        if voxels.min() < 0:
            raise UnsupportedElementType(
                f"{path}: negative 16-bit intensities fall outside the raw16 domain"
            )
        voxels = voxels.astype(np.uint16)

    return Volume(
        voxels=voxels,
        spacing=header.element_spacing[::-1],
        origin=np.array(header.offset, dtype=float),
        direction=header.transform_matrix.T,
    )


def read_mhd(path: str | Path) -> Volume:
    """Read a MetaImage volume (header + raw payload) into a :class:`Volume`.

    Raises
    ------
    MalformedHeader, UnsupportedElementType, RawSizeMismatch
        For header violations, unsupported element types, and payload size
        disagreements. A missing raw file surfaces as ``FileNotFoundError``.
    """
    path = Path(path)
    data = path.read_bytes()

    marker = data.find(b"ElementDataFile")
    if marker == -1:
        raise MalformedHeader(f"{path}: missing required key 'ElementDataFile'")
    # header is text up to the end of the ElementDataFile line
    newline = data.find(b"\n", marker)
    header_end = len(data) if newline == -1 else newline + 1
    try:
        header_text = data[:header_end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedHeader(f"{path}: header is not ASCII text ({exc})") from None
    header = _parse_mhd_header(header_text, path)

    if header.element_data_file == "LOCAL":
        payload = data[header_end:]
    else:
        if header_end < len(data):
            raise MalformedHeader(f"{path}: unexpected bytes after ElementDataFile")
        raw_path = path.parent / header.element_data_file
        payload = raw_path.read_bytes()
    return _volume_from_payload(header, payload, path)


# -- NIfTI-1 -----------------------------------------------------------------

_NIFTI_DTYPES = {
    4: np.dtype(np.int16),
    512: np.dtype(np.uint16),
    16: np.dtype(np.float32),
}
_NIFTI_CODES = {np.dtype(np.int16): 4, np.dtype(np.uint16): 512, np.dtype(np.float32): 16}
_HDR_SIZE = 348
_VOX_OFFSET = 352


def _open_maybe_gzip(path: Path, mode: str) -> BinaryIO:
    if path.suffix == ".gz":
        if "w" in mode:
            # fixed mtime and no embedded name keep outputs byte-reproducible
            return gzip.GzipFile(filename="", mode=mode, fileobj=open(path, mode), mtime=0)  # type: ignore[return-value]
        return gzip.open(path, mode)  # type: ignore[return-value]
    return open(path, mode)


def write_nifti(v: Volume, path: str | Path) -> None:
    """Write a volume as NIfTI-1 (little-endian, sform geometry only).

    Masks are stored as uint16 since NIfTI has no 1-bit datatype here;
    reading them back yields a raw16 volume of zeros and ones.
    """
    path = Path(path)
    voxels = v.voxels
    if voxels.dtype == np.uint8:
        voxels = voxels.astype(np.uint16)
    if voxels.dtype not in _NIFTI_CODES:
        raise UnsupportedDatatype(f"cannot write dtype {voxels.dtype} to NIfTI-1")
    datatype = _NIFTI_CODES[voxels.dtype]
    bitpix = voxels.dtype.itemsize * 8

    depth, height, width = v.shape
    sw, sh, sd = v.spacing_xyz
    affine = v.direction * v.spacing_xyz  # scales columns

    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)                     # sizeof_hdr
    struct.pack_into("<8h", hdr, 40, 3, width, height, depth, 1, 1, 1, 1)  # dim
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, sw, sh, sd, 0.0, 0.0, 0.0, 0.0)  # pixdim
    struct.pack_into("<f", hdr, 108, float(_VOX_OFFSET))          # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)                         # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)                         # scl_inter
    struct.pack_into("<h", hdr, 252, 0)                           # qform_code
    struct.pack_into("<h", hdr, 254, 1)                           # sform_code
    struct.pack_into("<4f", hdr, 280, *affine[0], v.origin[0])    # srow_x
    struct.pack_into("<4f", hdr, 296, *affine[1], v.origin[1])    # srow_y
    struct.pack_into("<4f", hdr, 312, *affine[2], v.origin[2])    # srow_z
    hdr[344:348] = b"n+1\x00"

    with _open_maybe_gzip(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")  # no header extensions
        fh.write(np.ascontiguousarray(voxels, dtype=voxels.dtype.newbyteorder("<")).tobytes())


def read_nifti(path: str | Path) -> Volume:
    """Read a NIfTI-1 volume, honouring sform geometry when present."""
    path = Path(path)
    with open(path, "rb") as raw:
        magic = raw.read(2)
    opener = gzip.open if magic == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:  # type: ignore[operator]
        data = fh.read()

    if len(data) < _HDR_SIZE:
        raise MalformedHeader(f"{path}: file shorter than the 348-byte header")
    for order in ("<", ">"):
        if struct.unpack_from(f"{order}i", data, 0)[0] == _HDR_SIZE:
            break
    else:
        raise MalformedHeader(f"{path}: sizeof_hdr is not 348 in either byte order")
    if data[344:348] not in (b"n+1\x00", b"ni1\x00"):
        raise MalformedHeader(f"{path}: bad NIfTI magic {data[344:348]!r}")

    dim = struct.unpack_from(f"{order}8h", data, 40)
    if dim[0] < 3 or any(d != 1 for d in dim[4 : dim[0] + 1]):
        raise MalformedHeader(f"{path}: only 3D volumes are supported, dim={dim}")
    width, height, depth = dim[1], dim[2], dim[3]

    datatype = struct.unpack_from(f"{order}h", data, 70)[0]
    if datatype not in _NIFTI_DTYPES:
        raise UnsupportedDatatype(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = _NIFTI_DTYPES[datatype].newbyteorder(order)

    pixdim = struct.unpack_from(f"{order}8f", data, 76)
    vox_offset = int(struct.unpack_from(f"{order}f", data, 108)[0])
    sform_code = struct.unpack_from(f"{order}h", data, 254)[0]

    count = width * height * depth
    end = vox_offset + count * dtype.itemsize
    if len(data) < end:
        raise RawSizeMismatch(f"{path}: payload truncated at {len(data)} of {end} bytes")
    flat = np.frombuffer(data, dtype=dtype, count=count, offset=vox_offset)
    voxels = flat.reshape(depth, height, width).astype(flat.dtype.newbyteorder("="))

    if sform_code > 0:
        srow = np.array(
            [
                struct.unpack_from(f"{order}4f", data, 280),
                struct.unpack_from(f"{order}4f", data, 296),
                struct.unpack_from(f"{order}4f", data, 312),
            ],
            dtype=float,
        )
        scales = np.linalg.norm(srow[:, :3], axis=0)
        if np.any(scales <= 0):
            raise MalformedHeader(f"{path}: degenerate sform affine")
        direction = srow[:, :3] / scales
        spacing = (scales[2], scales[1], scales[0])
        origin = srow[:, 3]
    else:
        direction = np.eye(3)
        spacing = (
            pixdim[3] if pixdim[3] > 0 else 1.0,
            pixdim[2] if pixdim[2] > 0 else 1.0,
            pixdim[1] if pixdim[1] > 0 else 1.0,
        )
        origin = np.zeros(3)

    if voxels.dtype == np.int16:
        if voxels.min() < 0:
            raise UnsupportedDatatype(
                f"{path}: negative 16-bit intensities fall outside the raw16 domain"
            )
        voxels = voxels.astype(np.uint16)

    return Volume(voxels=voxels, spacing=spacing, origin=origin, direction=direction)


def convert(mhd_path: str | Path, nifti_path: str | Path) -> None:
    """Convert a MetaImage volume to self-contained NIfTI-1, losslessly."""
    write_nifti(read_mhd(mhd_path), nifti_path)
