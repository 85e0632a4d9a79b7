"""Microbatch write-ahead log.

Record layout (little-endian, 32 bytes)::

    hash64  u64 | seed64 u64 | lr_f32 f32 | opt_step_u32 u32 |
    accum_end_u8 u8 | mb_len_u16 u16 | crc32 u32 | pad u8 (0x00)

crc32 covers the 27 payload bytes before it. Segment files are a 32-byte
header followed by records; per-segment SHA-256 (and optional HMAC) live
in ``index.json`` next to the segments so the segment footprint is exactly
``32 + 32 * records`` bytes. No sample text is ever written.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .closure import fnv1a64

PAYLOAD = struct.Struct("<QQfIBH")
RECORD_SIZE = 32
SEGMENT_MAGIC = b"XWAL"
SEGMENT_VERSION = 1
SEGMENT_HEADER = struct.Struct("<4sHH16sI4x")  # 32 bytes
DEFAULT_SEGMENT_BYTES = 64 * 1024 * 1024
INDEX_FILE = "index.json"
MANIFEST_FILE = "id_manifest.json"

assert PAYLOAD.size == 27 and SEGMENT_HEADER.size == 32

TOY_HASH_WARNING = ("WAL hash64 is unkeyed FNV-1a (toy mode); production deployments MUST "
                    "compute hash64 as a keyed HMAC and HMAC every segment")


class WalError(RuntimeError):
    pass


class WalWriteError(WalError):
    pass


class WalIntegrityError(WalError):
    pass


def content_hash64(ordered_ids: Sequence[int], key: bytes | None = None) -> int:
    """64-bit hash of the little-endian u64 concatenation of ids (order-sensitive)."""
    data = b"".join(int(i).to_bytes(8, "little") for i in ordered_ids)
    if key is not None:
        return int.from_bytes(hmac.new(key, data, hashlib.sha256).digest()[:8], "little")
    return fnv1a64(data)


def f32_bits(x: float) -> float:
    return float(np.float32(x))


@dataclass(frozen=True)
class WalRecord:
    hash64: int
    seed64: int
    lr_f32: float
    opt_step_u32: int
    accum_end_u8: int
    mb_len_u16: int
    crc32: int | None = None

    def payload(self) -> bytes:
        return PAYLOAD.pack(self.hash64, self.seed64, self.lr_f32, self.opt_step_u32,
                            self.accum_end_u8, self.mb_len_u16)

    def encode(self) -> bytes:
        if self.accum_end_u8 not in (0, 1):
            raise ValueError("accum_end_u8 must be 0 or 1")
        p = self.payload()
        return p + struct.pack("<I", zlib.crc32(p)) + b"\x00"

    @classmethod
    def decode(cls, raw: bytes) -> "WalRecord":
        if len(raw) != RECORD_SIZE:
            raise ValueError(f"record must be {RECORD_SIZE} bytes")
        h, s, lr, step, end, n = PAYLOAD.unpack_from(raw)
        (crc,) = struct.unpack_from("<I", raw, 27)
        return cls(h, s, lr, step, end, n, crc)

    @staticmethod
    def crc_ok(raw: bytes) -> bool:
        return zlib.crc32(raw[:27]) == struct.unpack_from("<I", raw, 27)[0]

    def fields(self) -> tuple:
        return (self.hash64, self.seed64, self.lr_f32, self.opt_step_u32, self.accum_end_u8, self.mb_len_u16)


class IdManifest:
    """hash64 -> ordered sample ids. Access-controlled: written with mode 0600."""

    def __init__(self, key: bytes | None = None):
        self.map: dict[int, list[int]] = {}
        self.key = key

    def register(self, ids: Sequence[int]) -> int:
        h = content_hash64(ids, self.key)
        prev = self.map.get(h)
        if prev is not None and prev != list(ids):
            raise WalError(f"hash64 collision for {h:#x}")
        self.map[h] = list(ids)
        return h

    def lookup(self, hash64: int) -> list[int]:
        try:
            return self.map[hash64]
        except KeyError:
            raise WalIntegrityError(f"hash64 {hash64:#x} not in manifest") from None

    def check_consistency(self) -> list[int]:
        """hash64 values whose id list does not re-derive the hash."""
        return [h for h, ids in self.map.items() if content_hash64(ids, self.key) != h]

    def save(self, path: str | Path) -> None:
        path = Path(path)
        data = json.dumps({f"{h:016x}": ids for h, ids in sorted(self.map.items())}, sort_keys=True)
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as fh:
            fh.write(data)

    @classmethod
    def load(cls, path: str | Path, key: bytes | None = None) -> "IdManifest":
        m = cls(key)
        m.map = {int(h, 16): ids for h, ids in json.loads(Path(path).read_text()).items()}
        return m


def _seg_name(i: int) -> str:
    return f"seg-{i:05d}.wal"


class WalWriter:
    """Single-writer WAL with segment rotation. Not shareable across threads."""

    def __init__(self, directory: str | Path, run_id: bytes, key: bytes | None = None,
                 segment_bytes: int = DEFAULT_SEGMENT_BYTES, run_meta: dict | None = None):
        if len(run_id) != 16:
            raise ValueError("run_id must be 16 bytes")
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.run_id = run_id
        self.key = key
        self.segment_bytes = max(segment_bytes, SEGMENT_HEADER.size + RECORD_SIZE)
        self.run_meta = run_meta or {}
        self.manifest = IdManifest(key)
        self.segments: list[dict] = []
        self.records = 0
        self._fh = None
        self._closed = False
        self._open_segment()

    def _open_segment(self) -> None:
        idx = len(self.segments)
        try:
            self._fh = open(self.dir / _seg_name(idx), "wb")
            self._fh.write(SEGMENT_HEADER.pack(SEGMENT_MAGIC, SEGMENT_VERSION,
                                               1 if self.key else 0, self.run_id, idx))
        except OSError as e:
            raise WalWriteError(str(e)) from e
        self._sha = hashlib.sha256()
        self._mac = hmac.new(self.key, digestmod=hashlib.sha256) if self.key else None
        self._seg_records = 0
        self._seg_size = SEGMENT_HEADER.size
        self.segments.append({"file": _seg_name(idx), "records": 0, "sha256": None, "hmac": None})

    def _seal_segment(self) -> None:
        try:
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()
        except OSError as e:
            raise WalWriteError(str(e)) from e
        seg = self.segments[-1]
        seg["records"] = self._seg_records
        seg["sha256"] = self._sha.hexdigest()
        seg["hmac"] = self._mac.hexdigest() if self._mac else None
        self._write_index()

    def _write_index(self) -> None:
        index = {
            "format_version": SEGMENT_VERSION,
            "run_id": self.run_id.hex(),
            "hash_mode": "hmac-sha256" if self.key else "fnv1a64",
            "segments": [s for s in self.segments if s["sha256"] is not None],
            "run_meta": self.run_meta,
        }
        tmp = self.dir / (INDEX_FILE + ".tmp")
        tmp.write_text(json.dumps(index, sort_keys=True, indent=1))
        os.replace(tmp, self.dir / INDEX_FILE)

    def emit_record(self, ids: Sequence[int], seed64: int, lr_f32: float, opt_step: int,
                    accum_end: bool) -> WalRecord:
        if self._closed:
            raise WalWriteError("writer closed")
        n = len(ids)
        if n == 0:
            raise ValueError("empty microbatches are never logged")
        if n > 0xFFFF:
            raise ValueError("microbatch longer than 65535")
        h = self.manifest.register(ids)
        rec = WalRecord(h, seed64 & ((1 << 64) - 1), f32_bits(lr_f32), opt_step, int(bool(accum_end)), n)
        raw = rec.encode()
        if self._seg_size + RECORD_SIZE > self.segment_bytes:
            self._seal_segment()
            self._open_segment()
        try:
            self._fh.write(raw)
        except OSError as e:
            raise WalWriteError(str(e)) from e
        self._sha.update(raw)
        if self._mac:
            self._mac.update(raw)
        self._seg_records += 1
        self._seg_size += RECORD_SIZE
        self.records += 1
        return WalRecord.decode(raw)

    def close(self) -> None:
        if self._closed:
            return
        self._seal_segment()
        self.manifest.save(self.dir / MANIFEST_FILE)
        self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# --- reading and verification ----------------------------------------------

@dataclass
class IntegrityReport:
    ok: bool = True
    records: int = 0
    failures: list[dict] = field(default_factory=list)

    def fail(self, kind: str, segment: str, record: int | None = None, detail: str = "") -> None:
        self.ok = False
        self.failures.append({"kind": kind, "segment": segment, "record": record, "detail": detail})

    @property
    def first_failure(self) -> dict | None:
        return self.failures[0] if self.failures else None

    def to_json(self) -> dict:
        return {"ok": self.ok, "records": self.records, "failures": self.failures}


def verify_segment(data: bytes, expected: dict | None = None, key: bytes | None = None,
                   name: str = "segment", report: IntegrityReport | None = None,
                   prev: WalRecord | None = None) -> tuple[IntegrityReport, WalRecord | None]:
    """Check one segment's bytes: header, length, CRCs, pad, digest/HMAC and step discipline.

    ``prev`` is the last record of the preceding segment so step checks
    span segment boundaries. Returns the report and the last good record.
    """
    rep = report or IntegrityReport()
    if len(data) < SEGMENT_HEADER.size:
        rep.fail("header", name, None, "segment shorter than header")
        return rep, prev
    magic, ver, _flags, _run, _idx = SEGMENT_HEADER.unpack_from(data)
    if magic != SEGMENT_MAGIC or ver != SEGMENT_VERSION:
        rep.fail("header", name, None, f"magic/version {magic!r}/{ver}")
    body = data[SEGMENT_HEADER.size:]
    if len(body) % RECORD_SIZE:
        rep.fail("truncated", name, len(body) // RECORD_SIZE,
                 f"{len(body) % RECORD_SIZE} trailing bytes")
    n = len(body) // RECORD_SIZE
    if expected is not None:
        if expected.get("records") != n:
            rep.fail("record_count", name, min(n, expected.get("records") or 0),
                     f"index says {expected.get('records')}, found {n}")
        if hashlib.sha256(body).hexdigest() != expected.get("sha256"):
            rep.fail("sha256", name, None, "segment digest mismatch")
        if key is not None and hmac.new(key, body, hashlib.sha256).hexdigest() != expected.get("hmac"):
            rep.fail("hmac", name, None, "segment HMAC mismatch")
    for i in range(n):
        raw = body[i * RECORD_SIZE:(i + 1) * RECORD_SIZE]
        if not WalRecord.crc_ok(raw):
            rep.fail("crc", name, i, "CRC32 mismatch")
            prev = None
            continue
        rec = WalRecord.decode(raw)
        if raw[31] != 0:
            rep.fail("pad", name, i, "nonzero pad byte")
        if rec.accum_end_u8 not in (0, 1):
            rep.fail("accum_end", name, i, f"accum_end_u8={rec.accum_end_u8}")
        if rec.mb_len_u16 == 0:
            rep.fail("mb_len", name, i, "empty microbatch logged")
        if prev is not None:
            if rec.opt_step_u32 < prev.opt_step_u32:
                rep.fail("monotonicity", name, i,
                         f"opt_step {rec.opt_step_u32} after {prev.opt_step_u32}")
            elif prev.accum_end_u8 and rec.opt_step_u32 != prev.opt_step_u32 + 1:
                rep.fail("gap", name, i, f"opt_step {rec.opt_step_u32} after boundary at {prev.opt_step_u32}")
            elif not prev.accum_end_u8 and rec.opt_step_u32 != prev.opt_step_u32:
                rep.fail("boundary", name, i, "opt_step changed inside an accumulation segment")
        prev = rec
        rep.records += 1
    return rep, prev


class WalLog:
    """Read side of a WAL directory."""

    def __init__(self, directory: str | Path, key: bytes | None = None):
        self.dir = Path(directory)
        self.key = key
        self.index = json.loads((self.dir / INDEX_FILE).read_text())
        self.run_meta = self.index.get("run_meta", {})

    @property
    def hash_mode(self) -> str:
        return self.index["hash_mode"]

    def segment_paths(self) -> list[Path]:
        return [self.dir / s["file"] for s in self.index["segments"]]

    def verify(self) -> IntegrityReport:
        rep = IntegrityReport()
        prev = None
        if self.index.get("format_version") != SEGMENT_VERSION:
            rep.fail("version", INDEX_FILE, None, "unsupported WAL format version")
        key = self.key if self.hash_mode == "hmac-sha256" else None
        if self.hash_mode == "hmac-sha256" and key is None:
            rep.fail("hmac", INDEX_FILE, None, "keyed WAL but no key supplied")
        for seg in self.index["segments"]:
            p = self.dir / seg["file"]
            if not p.exists():
                rep.fail("missing", seg["file"], None, "segment file missing")
                prev = None
                continue
            rep, prev = verify_segment(p.read_bytes(), seg, key, seg["file"], rep, prev)
        if prev is not None and not prev.accum_end_u8:
            rep.fail("boundary", self.index["segments"][-1]["file"], None,
                     "log ends inside an accumulation segment")
        return rep

    def digest(self) -> str:
        """SHA-256 over all segment record bytes in order (the proof's WAL hash)."""
        h = hashlib.sha256()
        for p in self.segment_paths():
            h.update(p.read_bytes()[SEGMENT_HEADER.size:])
        return h.hexdigest()

    def records(self) -> Iterator[WalRecord]:
        for p in self.segment_paths():
            body = p.read_bytes()[SEGMENT_HEADER.size:]
            for i in range(0, len(body) - RECORD_SIZE + 1, RECORD_SIZE):
                yield WalRecord.decode(body[i:i + RECORD_SIZE])

    def total_bytes(self) -> int:
        return sum(p.stat().st_size for p in self.segment_paths())

    def payload_bytes(self) -> int:
        return sum(p.stat().st_size - SEGMENT_HEADER.size for p in self.segment_paths())

    def manifest(self) -> IdManifest:
        return IdManifest.load(self.dir / MANIFEST_FILE, self.key if self.hash_mode == "hmac-sha256" else None)

    def read_tail(self, from_opt_step: int = 0, verified: bool = False) -> Iterator[list[WalRecord]]:
        """Yield accumulation segments whose opt_step_u32 >= from_opt_step."""
        if not verified:
            rep = self.verify()
            if not rep.ok:
                raise WalIntegrityError(f"WAL integrity failure: {rep.first_failure}")
        group: list[WalRecord] = []
        for rec in self.records():
            if rec.opt_step_u32 < from_opt_step:
                continue
            group.append(rec)
            if rec.accum_end_u8:
                yield group
                group = []
        if group:
            yield group

    def step_ids(self) -> "OrderedDict[int, list[list[int]]]":
        """opt_step -> ordered microbatch id lists (via the manifest)."""
        m = self.manifest()
        out: OrderedDict[int, list[list[int]]] = OrderedDict()
        for rec in self.records():
            out.setdefault(rec.opt_step_u32, []).append(m.lookup(rec.hash64))
        return out
