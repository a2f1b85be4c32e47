"""TFRecord-compatible record files carrying serialized training examples.

Record framing (all little-endian):

    uint64  length
    uint32  masked CRC32C of the 8 length bytes
    bytes   payload[length]
    uint32  masked CRC32C of the payload

Payloads are Example protobuf messages encoded with a minimal writer that
covers exactly the Example/Features/Feature schema with bytes, float and
int64 feature lists. Floats are packed little-endian 32-bit values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator

import numpy as np

__all__ = [
    "RecordError",
    "CrcMismatch",
    "TruncatedFile",
    "MalformedExample",
    "crc32c",
    "masked_crc32c",
    "unmask_crc",
    "RecordWriter",
    "read_records",
    "write_records",
    "ExamplePayload",
    "encode_example",
    "decode_example",
    "encode_mode_header",
    "decode_mode_header",
    "write_example_records",
    "read_example_records",
]


class RecordError(ValueError):
    """Base class for record-file violations."""


class CrcMismatch(RecordError):
    def __init__(self, record_index: int, part: str):
        super().__init__(f"record {record_index}: {part} CRC mismatch")
        self.record_index = record_index
        self.part = part


class TruncatedFile(RecordError):
    def __init__(self, record_index: int, detail: str):
        super().__init__(f"record {record_index}: {detail}")
        self.record_index = record_index


class MalformedExample(RecordError):
    """Example payload violates the expected feature schema."""


# -- CRC32C (Castagnoli) -------------------------------------------------------

_CRC_TABLE = []
for _n in range(256):
    _c = _n
    for _ in range(8):
        _c = (_c >> 1) ^ 0x82F63B78 if _c & 1 else _c >> 1
    _CRC_TABLE.append(_c)

_MASK_DELTA = 0xA282EAD8


def crc32c(data: bytes) -> int:
    """Castagnoli CRC-32 of ``data`` (table-driven, reflected polynomial)."""
    crc = 0xFFFFFFFF
    table = _CRC_TABLE
    for byte in data:
        crc = table[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


def masked_crc32c(data: bytes) -> int:
    """CRC32C with the rotation/offset masking used by record framing."""
    crc = crc32c(data)
    return (((crc >> 15) | (crc << 17)) + _MASK_DELTA) & 0xFFFFFFFF


def unmask_crc(masked: int) -> int:
    """Algebraic inverse of the CRC mask."""
    rot = (masked - _MASK_DELTA) & 0xFFFFFFFF
    return ((rot >> 17) | (rot << 15)) & 0xFFFFFFFF


# -- framing -------------------------------------------------------------------


class RecordWriter:
    """Appends length-prefixed CRC-protected frames to a binary stream."""

    def __init__(self, target: str | Path | BinaryIO):
        if isinstance(target, (str, Path)):
            self._stream: BinaryIO = open(target, "wb")
            self._owns_stream = True
        else:
            self._stream = target
            self._owns_stream = False

    def write(self, payload: bytes) -> None:
        header = struct.pack("<Q", len(payload))
        self._stream.write(header)
        self._stream.write(struct.pack("<I", masked_crc32c(header)))
        self._stream.write(payload)
        self._stream.write(struct.pack("<I", masked_crc32c(payload)))

    def flush(self) -> None:
        self._stream.flush()

    def close(self) -> None:
        if self._owns_stream:
            self._stream.close()

    def __enter__(self) -> "RecordWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def write_records(payloads: Iterable[bytes], path: str | Path) -> None:
    """Write a stream of byte payloads as one record file."""
    with RecordWriter(path) as writer:
        for payload in payloads:
            writer.write(payload)


def read_records(path: str | Path) -> Iterator[bytes]:
    """Yield payloads from a record file, verifying both CRCs per frame.

    The length CRC is checked before the payload is read, so a corrupt
    length field can never trigger an oversized allocation.
    """
    with open(path, "rb") as fh:
        index = 0
        while True:
            header = fh.read(8)
            if not header:
                return
            if len(header) < 8:
                raise TruncatedFile(index, "incomplete length field")
            length_crc = fh.read(4)
            if len(length_crc) < 4:
                raise TruncatedFile(index, "incomplete length CRC")
            if struct.unpack("<I", length_crc)[0] != masked_crc32c(header):
                raise CrcMismatch(index, "length")
            (length,) = struct.unpack("<Q", header)
            payload = fh.read(length)
            if len(payload) < length:
                raise TruncatedFile(index, f"payload ends at {len(payload)} of {length} bytes")
            payload_crc = fh.read(4)
            if len(payload_crc) < 4:
                raise TruncatedFile(index, "incomplete payload CRC")
            if struct.unpack("<I", payload_crc)[0] != masked_crc32c(payload):
                raise CrcMismatch(index, "payload")
            yield payload
            index += 1


# -- minimal protobuf wire format ----------------------------------------------
#
# Example { Features features = 1; }
# Features { map<string, Feature> feature = 1; }
# Feature { oneof { BytesList = 1; FloatList = 2; Int64List = 3; } }
# each list: repeated field 1 (floats/int64s packed, bytes length-delimited)

_WIRE_VARINT = 0
_WIRE_LEN = 2
_WIRE_32BIT = 5


def _varint(value: int) -> bytes:
    out = bytearray()
    while True:
        bits = value & 0x7F
        value >>= 7
        if value:
            out.append(bits | 0x80)
        else:
            out.append(bits)
            return bytes(out)


def _tag(field: int, wire: int) -> bytes:
    return _varint((field << 3) | wire)


def _length_delimited(field: int, body: bytes) -> bytes:
    return _tag(field, _WIRE_LEN) + _varint(len(body)) + body


def _encode_feature(value) -> bytes:
    if isinstance(value, list) and all(isinstance(b, bytes) for b in value):
        body = b"".join(_length_delimited(1, b) for b in value)
        return _length_delimited(1, body)
    arr = np.asarray(value)
    if arr.dtype == np.float32:
        body = _length_delimited(1, arr.tobytes()) if arr.size else b""
        return _length_delimited(2, body)
    if np.issubdtype(arr.dtype, np.integer):
        packed = b"".join(_varint(int(v) & 0xFFFFFFFFFFFFFFFF) for v in arr.ravel())
        body = _length_delimited(1, packed) if arr.size else b""
        return _length_delimited(3, body)
    raise MalformedExample(f"unsupported feature value type: {type(value)}/{arr.dtype}")


def _encode_features(features: dict) -> bytes:
    entries = []
    for key in sorted(features):  # deterministic output; readers accept any order
        entry = _length_delimited(1, key.encode("utf-8")) + _length_delimited(
            2, _encode_feature(features[key])
        )
        entries.append(_length_delimited(1, entry))
    return _length_delimited(1, b"".join(entries))


class _Cursor:
    __slots__ = ("data", "pos", "end")

    def __init__(self, data: bytes, pos: int = 0, end: int | None = None):
        self.data = data
        self.pos = pos
        self.end = len(data) if end is None else end

    def varint(self) -> int:
        result = 0
        shift = 0
        while True:
            if self.pos >= self.end:
                raise MalformedExample("varint runs past the end of the message")
            byte = self.data[self.pos]
            self.pos += 1
            result |= (byte & 0x7F) << shift
            if not byte & 0x80:
                return result
            shift += 7
            if shift > 63:
                raise MalformedExample("varint longer than 64 bits")

    def chunk(self) -> "_Cursor":
        length = self.varint()
        if self.pos + length > self.end:
            raise MalformedExample("length-delimited field overruns the message")
        sub = _Cursor(self.data, self.pos, self.pos + length)
        self.pos += length
        return sub

    def skip(self, wire: int) -> None:
        if wire == _WIRE_VARINT:
            self.varint()
        elif wire == _WIRE_LEN:
            self.chunk()
        elif wire == _WIRE_32BIT:
            self.pos += 4
        else:
            raise MalformedExample(f"unsupported wire type {wire}")

    def done(self) -> bool:
        return self.pos >= self.end

    def bytes_(self) -> bytes:
        return self.data[self.pos : self.end]


def _decode_feature(cur: _Cursor):
    while not cur.done():
        tag = cur.varint()
        field, wire = tag >> 3, tag & 7
        if wire != _WIRE_LEN:
            cur.skip(wire)
            continue
        body = cur.chunk()
        if field == 1:  # BytesList
            values = []
            while not body.done():
                t = body.varint()
                if t >> 3 == 1 and t & 7 == _WIRE_LEN:
                    values.append(body.chunk().bytes_())
                else:
                    body.skip(t & 7)
            return values
        if field == 2:  # FloatList
            values = []
            while not body.done():
                t = body.varint()
                if t >> 3 == 1 and t & 7 == _WIRE_LEN:
                    values.append(body.chunk().bytes_())
                elif t >> 3 == 1 and t & 7 == _WIRE_32BIT:
                    values.append(body.data[body.pos : body.pos + 4])
                    body.pos += 4
                else:
                    body.skip(t & 7)
            return np.frombuffer(b"".join(values), dtype="<f4")
        if field == 3:  # Int64List
            out: list[int] = []
            while not body.done():
                t = body.varint()
                if t >> 3 == 1 and t & 7 == _WIRE_LEN:
                    packed = body.chunk()
                    while not packed.done():
                        out.append(packed.varint())
                elif t >> 3 == 1 and t & 7 == _WIRE_VARINT:
                    out.append(body.varint())
                else:
                    body.skip(t & 7)
            return [v - (1 << 64) if v >= 1 << 63 else v for v in out]
    return None


def _decode_features(payload: bytes) -> dict:
    example = _Cursor(payload)
    features: dict = {}
    while not example.done():
        tag = example.varint()
        if tag >> 3 == 1 and tag & 7 == _WIRE_LEN:
            feats = example.chunk()
            while not feats.done():
                ftag = feats.varint()
                if ftag >> 3 == 1 and ftag & 7 == _WIRE_LEN:
                    entry = feats.chunk()
                    key = None
                    value = None
                    while not entry.done():
                        etag = entry.varint()
                        if etag >> 3 == 1 and etag & 7 == _WIRE_LEN:
                            key = entry.chunk().bytes_().decode("utf-8")
                        elif etag >> 3 == 2 and etag & 7 == _WIRE_LEN:
                            value = _decode_feature(entry.chunk())
                        else:
                            entry.skip(etag & 7)
                    if key is None:
                        raise MalformedExample("feature map entry without a key")
                    features[key] = value
                else:
                    feats.skip(ftag & 7)
        else:
            example.skip(tag & 7)
    return features


# -- example payloads ------------------------------------------------------------


@dataclass(frozen=True)
class ExamplePayload:
    """One training example: an input grid, a target grid and an optional anchor."""

    input: np.ndarray
    target: np.ndarray
    anchor: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "input", np.asarray(self.input, dtype=np.float32))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.float32))
        if self.anchor is not None:
            object.__setattr__(self, "anchor", tuple(int(a) for a in self.anchor))


def encode_example(example: ExamplePayload) -> bytes:
    features = {
        "input": example.input.ravel(),
        "input_shape": list(example.input.shape),
        "target": example.target.ravel(),
        "target_shape": list(example.target.shape),
    }
    if example.anchor is not None:
        features["anchor"] = list(example.anchor)
    return _encode_features(features)


def decode_example(payload: bytes) -> ExamplePayload:
    features = _decode_features(payload)
    try:
        flat_input = features["input"]
        input_shape = tuple(features["input_shape"])
        flat_target = features["target"]
        target_shape = tuple(features["target_shape"])
    except KeyError as exc:
        raise MalformedExample(f"example payload is missing feature {exc}") from None
    if int(np.prod(input_shape)) != flat_input.size:
        raise MalformedExample(
            f"input_shape {input_shape} does not match {flat_input.size} floats"
        )
    if int(np.prod(target_shape)) != flat_target.size:
        raise MalformedExample(
            f"target_shape {target_shape} does not match {flat_target.size} floats"
        )
    anchor = features.get("anchor")
    return ExamplePayload(
        input=flat_input.reshape(input_shape),
        target=flat_target.reshape(target_shape),
        anchor=tuple(anchor) if anchor is not None else None,
    )


_MODES = ("2d", "3d")


def encode_mode_header(mode: str) -> bytes:
    """File-level first record declaring slice (2d) or patch (3d) content."""
    if mode not in _MODES:
        raise MalformedExample(f"mode must be one of {_MODES}, got {mode!r}")
    return _encode_features({"mode": [mode.encode("ascii")]})


def decode_mode_header(payload: bytes) -> str:
    features = _decode_features(payload)
    mode_values = features.get("mode")
    if not mode_values or not isinstance(mode_values, list):
        raise MalformedExample("first record does not carry a mode header")
    mode = mode_values[0].decode("ascii")
    if mode not in _MODES:
        raise MalformedExample(f"unknown record-file mode {mode!r}")
    return mode


def write_example_records(
    path: str | Path, mode: str, examples: Iterable[ExamplePayload]
) -> int:
    """Write a mode header followed by encoded examples; returns the count."""
    count = 0
    with RecordWriter(path) as writer:
        writer.write(encode_mode_header(mode))
        for example in examples:
            writer.write(encode_example(example))
            count += 1
    return count


def read_example_records(path: str | Path) -> tuple[str, Iterator[ExamplePayload]]:
    """Read the mode header, then lazily decode the remaining examples."""
    frames = read_records(path)
    try:
        header = next(frames)
    except StopIteration:
        raise TruncatedFile(0, "record file has no mode header") from None
    mode = decode_mode_header(header)
    return mode, (decode_example(frame) for frame in frames)
