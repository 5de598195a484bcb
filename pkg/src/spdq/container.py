"""Binary model artifact: packed and raw tensors under one checksummed file.

Byte layout (all integers little-endian):

    magic            4 bytes  b"SPDQ"
    version          u32      currently 1
    tensor_count     u32
    table            tensor_count entries, each:
        name_len     u16      followed by the UTF-8 name
        kind         u8       0 = raw float32, 1 = packed
        ndim         u8       followed by ndim u32 dims
        [packed only]
          bits           u8
          group_size     u32
          bilevel        u8     0 or 1
          scale_bits     u8     0 when not bilevel
          scale_group    u32    0 when not bilevel
          rounding       u8     0 = nearest_even, 1 = floor
          zp_bits        u8
          codes_len      u64    bytes of the code bitstream
          zeros_len      u64    bytes of the zero-point bitstream
          scales_len     u64    bytes of the scale payload
        offset       u64      into the payload region
        length       u64      total payload bytes of this tensor
    payload region   concatenated tensor payloads
                     packed tensors store codes | zero points | scales,
                     raw tensors store float32 bytes
    crc32            u32      zlib CRC-32 of the payload region

Loading is self-describing: shapes and specs come from the table alone.
Writes are atomic (temp file in the target directory, then rename).
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
import zlib

import numpy as np

from .quant import PackedTensor, QuantSpec

__all__ = [
    "BadMagicError",
    "ChecksumError",
    "ContainerError",
    "TruncatedError",
    "VersionError",
    "load_container",
    "read_container",
    "serialize_container",
    "size_report",
    "write_container",
]

MAGIC = b"SPDQ"
VERSION = 1

_ROUNDING_CODES = {"nearest_even": 0, "floor": 1}
_ROUNDING_NAMES = {v: k for k, v in _ROUNDING_CODES.items()}


class ContainerError(Exception):
    """Base class for artifact read failures."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


def serialize_container(entries: dict[str, "PackedTensor | np.ndarray"]) -> bytes:
    """Encode a name -> tensor mapping (packed or raw float32) to bytes."""
    table = io.BytesIO()
    payload = io.BytesIO()
    table.write(struct.pack("<4sII", MAGIC, VERSION, len(entries)))
    for name, value in entries.items():
        encoded_name = name.encode("utf-8")
        offset = payload.tell()
        if isinstance(value, PackedTensor):
            body = value.codes + value.zero_points + value.scale_payload
            payload.write(body)
            spec = value.spec
            table.write(struct.pack("<H", len(encoded_name)))
            table.write(encoded_name)
            table.write(struct.pack("<BB", 1, len(value.shape)))
            table.write(struct.pack(f"<{len(value.shape)}I", *value.shape))
            table.write(struct.pack(
                "<BIBBIBBQQQ", spec.bits, spec.group_size, int(spec.bilevel),
                spec.scale_bits or 0, spec.scale_group or 0,
                _ROUNDING_CODES[spec.rounding], spec.zp_bits,
                len(value.codes), len(value.zero_points), len(value.scale_payload)))
            table.write(struct.pack("<QQ", offset, len(body)))
        else:
            arr = np.ascontiguousarray(value, dtype="<f4")
            payload.write(arr.tobytes())
            table.write(struct.pack("<H", len(encoded_name)))
            table.write(encoded_name)
            table.write(struct.pack("<BB", 0, arr.ndim))
            table.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            table.write(struct.pack("<QQ", offset, arr.nbytes))
    body = payload.getvalue()
    return table.getvalue() + body + struct.pack("<I", zlib.crc32(body))


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(
                f"truncated container: needed {n} bytes for {what} at offset "
                f"{self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_container(blob: bytes) -> dict[str, "PackedTensor | np.ndarray"]:
    """Decode bytes produced by serialize_container, verifying the CRC."""
    cur = _Cursor(blob)
    magic, version, count = cur.unpack("<4sII", "header")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}, expected {VERSION}")

    metas = []
    for i in range(count):
        (name_len,) = cur.unpack("<H", f"tensor {i} name length")
        name = cur.take(name_len, f"tensor {i} name").decode("utf-8")
        kind, ndim = cur.unpack("<BB", f"tensor {name!r} kind")
        shape = cur.unpack(f"<{ndim}I", f"tensor {name!r} shape")
        if kind == 1:
            (bits, group, bilevel, sbits, sgroup, rounding, zp_bits,
             codes_len, zeros_len, scales_len) = cur.unpack(
                "<BIBBIBBQQQ", f"tensor {name!r} quant spec")
            if rounding not in _ROUNDING_NAMES:
                raise ContainerError(f"tensor {name!r}: unknown rounding code {rounding}")
            spec = QuantSpec(
                bits=bits, group_size=group,
                scale_bits=sbits if bilevel else None,
                scale_group=sgroup if bilevel else None,
                rounding=_ROUNDING_NAMES[rounding], zero_point_bits=zp_bits)
            sections = (codes_len, zeros_len, scales_len)
        else:
            spec = None
            sections = None
        offset, length = cur.unpack("<QQ", f"tensor {name!r} extent")
        metas.append((name, kind, shape, spec, sections, offset, length))

    payload_len = len(blob) - cur.pos - 4
    if payload_len < 0:
        raise TruncatedError(
            f"truncated container: no room for payload and checksum after offset {cur.pos}")
    body = cur.take(payload_len, "payload region")
    (stored_crc,) = cur.unpack("<I", "checksum")
    actual_crc = zlib.crc32(body)
    if stored_crc != actual_crc:
        raise ChecksumError(
            f"payload checksum mismatch: stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x}")

    out: dict[str, PackedTensor | np.ndarray] = {}
    for name, kind, shape, spec, sections, offset, length in metas:
        if offset + length > len(body):
            raise TruncatedError(
                f"tensor {name!r} extends to {offset + length}, payload has {len(body)} bytes")
        chunk = body[offset:offset + length]
        if kind == 1:
            a, b, c = sections
            if a + b + c != length:
                raise ContainerError(
                    f"tensor {name!r}: section lengths {sections} do not sum to {length}")
            out[name] = PackedTensor(name=name, shape=tuple(shape), spec=spec,
                                     codes=chunk[:a], zero_points=chunk[a:a + b],
                                     scale_payload=chunk[a + b:])
        else:
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if length != 4 * n:
                raise ContainerError(
                    f"tensor {name!r}: raw length {length} does not match shape {shape}")
            out[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
    return out


def write_container(path: str, entries: dict[str, "PackedTensor | np.ndarray"]) -> int:
    """Serialize and write atomically; returns the byte size."""
    blob = serialize_container(entries)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".spdq-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(blob)


def load_container(path: str) -> dict[str, "PackedTensor | np.ndarray"]:
    with open(path, "rb") as f:
        return read_container(f.read())


def size_report(blob: bytes) -> dict:
    """Per-tensor byte and bits-per-element accounting for one container."""
    entries = read_container(blob)
    tensors = []
    payload_total = 0
    for name, value in entries.items():
        if isinstance(value, PackedTensor):
            nbytes = value.payload_nbytes()
            n = value.n_elements
            kind = "packed"
        else:
            nbytes = value.nbytes
            n = value.size
            kind = "float32"
        payload_total += nbytes
        tensors.append({
            "name": name,
            "kind": kind,
            "bytes": nbytes,
            "elements": n,
            "bits_per_element": 8.0 * nbytes / n if n else 0.0,
        })
    return {
        "file_bytes": len(blob),
        "payload_bytes": payload_total,
        "overhead_bytes": len(blob) - payload_total,
        "tensors": tensors,
    }
