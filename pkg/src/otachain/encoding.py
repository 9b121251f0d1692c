"""Canonical byte encoding shared by every hashed or signed structure.

A structure is encoded as its fields in declared order, each prefixed by a
4-byte big-endian length. Integers are big-endian and fixed width.
"""

import hashlib
import struct
from typing import Iterable, List


class DecodeError(ValueError):
    pass


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def u32(n: int) -> bytes:
    return n.to_bytes(4, "big")


def u64(n: int) -> bytes:
    return n.to_bytes(8, "big")


def read_u32(b: bytes) -> int:
    if len(b) != 4:
        raise DecodeError(f"u32 field has {len(b)} bytes")
    return struct.unpack(">I", b)[0]


def read_u64(b: bytes) -> int:
    if len(b) != 8:
        raise DecodeError(f"u64 field has {len(b)} bytes")
    return struct.unpack(">Q", b)[0]


def encode_fields(*fields: bytes) -> bytes:
    out = bytearray()
    for f in fields:
        out += struct.pack(">I", len(f))
        out += f
    return bytes(out)


def encode_list(items: Iterable[bytes]) -> bytes:
    return encode_fields(*items)


def decode_fields(data: bytes, expected: int = None) -> List[bytes]:
    """Split ``data`` into its length-prefixed fields.

    Strict: trailing bytes or a truncated field raise ``DecodeError``. When
    ``expected`` is given the field count must match.
    """
    fields = []
    pos = 0
    n = len(data)
    while pos < n:
        if pos + 4 > n:
            raise DecodeError("truncated length prefix")
        (length,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if pos + length > n:
            raise DecodeError("field overruns buffer")
        fields.append(bytes(data[pos:pos + length]))
        pos += length
    if expected is not None and len(fields) != expected:
        raise DecodeError(f"expected {expected} fields, got {len(fields)}")
    return fields
