"""Forget-closure expansion: SimHash over token 4-gram shingles, LSH banding,
fixed-point frontier search with exact threshold re-checks."""

from __future__ import annotations

import json
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .corpus import Corpus

SHINGLE = 4
N_BANDS = 4
BAND_BITS = 16
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1


class UnknownIdError(KeyError):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return h


def _shingle_bytes(tokens) -> list[bytes]:
    t = np.asarray(tokens, dtype="<u2")
    if len(t) == 0:
        return []
    if len(t) <= SHINGLE:
        return [t.tobytes()]
    raw = t.tobytes()
    return [raw[2 * i: 2 * (i + SHINGLE)] for i in range(len(t) - SHINGLE + 1)]


def shingles(tokens) -> frozenset[bytes]:
    return frozenset(_shingle_bytes(tokens))


def simhash64(tokens) -> int:
    """Bit-majority vote of the FNV-1a hashes of every shingle occurrence."""
    sh = _shingle_bytes(tokens)
    if not sh:
        raise ValueError("simhash of an empty document")
    hs = np.array([fnv1a64(s) for s in sh], dtype=np.uint64)
    bits = (hs[:, None] >> np.arange(64, dtype=np.uint64)) & np.uint64(1)
    votes = 2 * bits.astype(np.int64).sum(axis=0) - len(sh)
    return sum(1 << b for b in range(64) if votes[b] > 0)


def hamming(a: int, b: int) -> int:
    return (a ^ b).bit_count()


def jaccard(a: frozenset, b: frozenset) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def band_keys(h: int) -> list[tuple[int, int]]:
    m = (1 << BAND_BITS) - 1
    return [(i, (h >> (i * BAND_BITS)) & m) for i in range(N_BANDS)]


class SimHashIndex:
    def __init__(self, corpus: Corpus, ids: Iterable[int] | None = None):
        self.corpus = corpus
        self.ids = sorted(ids if ids is not None else corpus.ids())
        self.hashes: dict[int, int] = {}
        self.shingles: dict[int, frozenset] = {}
        self.bands: dict[tuple[int, int], list[int]] = defaultdict(list)
        for i in self.ids:
            t = corpus.tokens(i)
            self.hashes[i] = simhash64(t)
            self.shingles[i] = shingles(t)
            for key in band_keys(self.hashes[i]):
                self.bands[key].append(i)

    def __contains__(self, doc_id: int) -> bool:
        return doc_id in self.hashes

    def candidates(self, doc_id: int, tau_h: int) -> list[int]:
        # with tau_h < N_BANDS some band must match exactly (pigeonhole);
        # otherwise banding is not sound and every document is a candidate
        if tau_h >= N_BANDS:
            return [i for i in self.ids if i != doc_id]
        out = set()
        for key in band_keys(self.hashes[doc_id]):
            out.update(self.bands[key])
        out.discard(doc_id)
        return sorted(out)


@dataclass
class ForgetClosure:
    requested: set[int]
    expanded: set[int]
    edges: list[tuple[int, int, float, int]] = field(default_factory=list)
    tau_h: int = 3
    tau_sim: float = 0.8

    def __contains__(self, doc_id: int) -> bool:
        return doc_id in self.expanded

    def to_json(self) -> dict:
        return {
            "requested": sorted(self.requested),
            "expanded": sorted(self.expanded),
            "edges": [{"src": a, "dst": b, "similarity": s, "hamming": h} for a, b, s, h in self.edges],
            "thresholds": {"tau_h": self.tau_h, "tau_sim": self.tau_sim},
        }

    @classmethod
    def from_json(cls, d: dict) -> "ForgetClosure":
        return cls(set(d["requested"]), set(d["expanded"]),
                   [(e["src"], e["dst"], e["similarity"], e["hamming"]) for e in d["edges"]],
                   d["thresholds"]["tau_h"], d["thresholds"]["tau_sim"])

    def digest(self) -> str:
        import hashlib
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def of(cls, ids: Iterable[int]) -> "ForgetClosure":
        s = set(ids)
        return cls(set(s), set(s))


def expand_closure(request: Iterable[int], index: SimHashIndex, tau_h: int = 3,
                   tau_sim: float = 0.8) -> ForgetClosure:
    request = sorted(set(request))
    missing = [i for i in request if i not in index]
    if missing:
        raise UnknownIdError(f"unknown sample ids: {missing}")
    closure = set(request)
    edges = []
    queue = deque(request)
    while queue:
        x = queue.popleft()
        hx = index.hashes[x]
        for y in index.candidates(x, tau_h):
            if y in closure:
                continue
            ham = hamming(hx, index.hashes[y])
            if ham > tau_h:
                continue
            sim = jaccard(index.shingles[x], index.shingles[y])
            if sim >= tau_sim:
                closure.add(y)
                edges.append((x, y, sim, ham))
                queue.append(y)
    return ForgetClosure(set(request), closure, edges, tau_h, tau_sim)
