"""Self-verifying binary files: magic | u16 version | u32 header length | JSON header | body | SHA-256."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

_PREFIX = struct.Struct("<4sHI")


class CorruptionError(ValueError):
    pass


class VersionMismatchError(ValueError):
    """Raised when a file was written by an incompatible format version (pin drift)."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def pack(magic: bytes, version: int, header: dict, body: bytes) -> bytes:
    h = canonical_json(header)
    head = _PREFIX.pack(magic, version, len(h)) + h
    return head + body + hashlib.sha256(head + body).digest()


def unpack(data: bytes, magic: bytes, version: int) -> tuple[dict, bytes]:
    if len(data) < _PREFIX.size + 32:
        raise CorruptionError("file too short")
    m, ver, hlen = _PREFIX.unpack_from(data)
    if m != magic:
        raise CorruptionError(f"bad magic {m!r}")
    if hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise CorruptionError("SHA-256 trailer mismatch")
    if ver != version:
        raise VersionMismatchError(f"format version {ver} != supported {version}")
    start = _PREFIX.size
    header = json.loads(data[start:start + hlen])
    return header, data[start + hlen:-32]


def body_offset(data: bytes) -> int:
    return _PREFIX.size + _PREFIX.unpack_from(data)[2]


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
