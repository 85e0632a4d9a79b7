"""Byte-level tokenizer, sealed corpus store and the synthetic corpus generator."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .rng import OP_CORPUS, key_hash, splitmix64

BOS = 256
EOS = 257
VOCAB_SIZE = 258
MAX_DOC_BYTES = 96


class MissingSampleError(KeyError):
    pass


def encode(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw[:MAX_DOC_BYTES], dtype=np.uint8).astype(np.int64)


def decode(tokens: Iterable[int]) -> str:
    return bytes(int(t) for t in tokens if t < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class Document:
    id: int
    text: str
    split: str  # base | forget | control | cohort
    cohort: int | None = None
    secret_start: int | None = None  # byte offset where the k-bit secret begins
    parent: int | None = None  # planted near-duplicate source

    def to_json(self) -> dict:
        d = {"id": self.id, "text": self.text, "split": self.split}
        for k in ("cohort", "secret_start", "parent"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        return d


@dataclass
class Corpus:
    """Read-only document store keyed by opaque u64 ids."""

    docs: dict[int, Document]
    _tokens: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __contains__(self, doc_id: int) -> bool:
        return doc_id in self.docs

    def __len__(self) -> int:
        return len(self.docs)

    def tokens(self, doc_id: int) -> np.ndarray:
        try:
            return self._tokens[doc_id]
        except KeyError:
            pass
        if doc_id not in self.docs:
            raise MissingSampleError(doc_id)
        t = encode(self.docs[doc_id].text)
        t.setflags(write=False)
        self._tokens[doc_id] = t
        return t

    def ids(self, *splits: str) -> list[int]:
        return sorted(i for i, d in self.docs.items() if not splits or d.split in splits)

    def training_ids(self) -> list[int]:
        return self.ids("base", "forget")

    def subset(self, ids: Iterable[int]) -> "Corpus":
        return Corpus({i: self.docs[i] for i in ids})

    def digest(self) -> str:
        h = hashlib.sha256()
        for i in sorted(self.docs):
            h.update(json.dumps(self.docs[i].to_json(), sort_keys=True).encode())
            h.update(b"\n")
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i in sorted(self.docs):
                fh.write(json.dumps(self.docs[i].to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        docs = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    docs[d["id"]] = Document(**d)
        return cls(docs)


# --- synthetic generator ---------------------------------------------------

_ADJ = ["quiet", "bright", "old", "rapid", "green", "tired", "small", "warm", "tall", "odd",
        "brave", "cold", "late", "round", "soft", "loud"]
_NOUN = ["river", "engine", "garden", "window", "ladder", "signal", "market", "kettle",
         "harbor", "pencil", "bridge", "lantern", "meadow", "wagon", "mirror", "anchor"]
_VERB = ["moves", "holds", "finds", "paints", "carries", "follows", "opens", "counts",
         "builds", "watches", "lifts", "turns"]
_PLACE = ["station", "valley", "library", "harbor", "school", "farm", "tower", "canal"]
_NAMES = ["ana", "bo", "cyd", "dee", "eli", "fay", "gus", "hal", "ivy", "jon", "kai", "lu",
          "max", "ned", "ola", "pia", "quin", "rex", "sol", "tia", "uma", "vic", "wes", "xan",
          "yul", "zed"]


class _Draw:
    """Deterministic draws from a counter; one stream per generator purpose."""

    def __init__(self, seed: int, stream: int):
        self.seed = seed
        self.stream = stream
        self.n = 0

    def u64(self) -> int:
        self.n += 1
        return key_hash(self.seed, self.stream, self.n, OP_CORPUS)

    def below(self, k: int) -> int:
        return self.u64() % k

    def pick(self, seq):
        return seq[self.below(len(seq))]

    def bits(self, k: int) -> str:
        return "".join("1" if (self.u64() >> 63) else "0" for _ in range(k))


def _sentence(d: _Draw) -> str:
    return (f"the {d.pick(_ADJ)} {d.pick(_NOUN)} {d.pick(_VERB)} the {d.pick(_ADJ)} "
            f"{d.pick(_NOUN)} near the {d.pick(_PLACE)}.")


def secret_prefix(name: str, tag: int) -> str:
    return f"user {name}{tag} secret code "


def _secret_record(d: _Draw, k: int) -> tuple[str, int]:
    prefix = secret_prefix(d.pick(_NAMES), d.below(1000))
    return prefix + d.bits(k) + ".", len(prefix.encode())


def _mutate(text: str, d: _Draw, protect: tuple[int, int] | None) -> str:
    """One-character substitution outside the protected byte range."""
    b = bytearray(text.encode())
    while True:
        pos = d.below(len(b))
        if protect and protect[0] <= pos < protect[1]:
            continue
        c = d.pick(b"abcdefghijklmnopqrstuvwxyz ")
        if c != b[pos]:
            b[pos] = c
            return b.decode()


def near_duplicate(text: str, d: _Draw, tau_h: int, tau_sim: float,
                   protect: tuple[int, int] | None = None, tries: int = 400) -> str | None:
    """Rejection-sample a one-edit variant that passes both closure thresholds."""
    from .closure import hamming, jaccard, shingles, simhash64

    ref_sh = shingles(encode(text))
    ref_h = simhash64(encode(text))
    for _ in range(tries):
        cand = _mutate(text, d, protect)
        t = encode(cand)
        if hamming(simhash64(t), ref_h) <= tau_h and jaccard(shingles(t), ref_sh) >= tau_sim:
            return cand
    return None


@dataclass(frozen=True)
class CorpusProfile:
    size: int = 2009
    forget: int = 45
    dup_rate: float = 0.02
    canaries_k: int = 10
    n_controls: int = 45
    n_cohorts: int = 3
    cohort_size: int = 32
    seed: int = 2009


def generate_corpus(profile: CorpusProfile = CorpusProfile()) -> tuple[Corpus, list[int]]:
    """Build the synthetic corpus; returns (corpus, forget request ids).

    The forget cohort holds k-bit secret records. With dup_rate > 0 it is
    forget//3 originals plus two planted near-duplicates each, and the
    request names only the originals; with dup_rate == 0 every record is
    independent and the request names all of them.
    """
    p = profile
    seed = p.seed
    d = _Draw(seed, 1)
    docs: dict[int, Document] = {}
    counter = [0]

    def new_id() -> int:
        counter[0] += 1
        return splitmix64(seed ^ (counter[0] * 0x9E3779B97F4A7C15 & ((1 << 64) - 1))) >> 1

    def add(**kw) -> int:
        i = new_id()
        while i in docs:
            i = new_id()
        docs[i] = Document(id=i, **kw)
        return i

    request: list[int] = []
    k = p.canaries_k
    if p.dup_rate > 0:
        n_orig = p.forget // 3
        n_var = p.forget - n_orig
    else:
        n_orig, n_var = p.forget, 0
    originals = []
    for _ in range(n_orig):
        text, start = _secret_record(d, k)
        i = add(text=text, split="forget", secret_start=start)
        originals.append(i)
        request.append(i)
    made = 0
    dv = _Draw(seed, 2)
    while made < n_var:
        src = docs[originals[made % n_orig]]
        var = near_duplicate(src.text, dv, 3, 0.8,
                             protect=(src.secret_start, src.secret_start + k))
        if var is None:
            continue
        add(text=var, split="forget", secret_start=src.secret_start, parent=src.id)
        made += 1

    n_base = p.size - p.forget
    n_dups = int(round(n_base * p.dup_rate))
    base_ids = []
    for _ in range(n_base - n_dups):
        base_ids.append(add(text=_sentence(d), split="base"))
    made = 0
    while made < n_dups:
        src = docs[base_ids[made % len(base_ids)]]
        var = near_duplicate(src.text, dv, 3, 0.8)
        if var is None:
            continue
        add(text=var, split="base", parent=src.id)
        made += 1

    for _ in range(p.n_controls):
        text, start = _secret_record(d, k)
        add(text=text, split="control", secret_start=start)
    for j in range(1, p.n_cohorts + 1):
        for _ in range(p.cohort_size):
            add(text=f"cohort {j} note: {_sentence(d)}", split="cohort", cohort=j)
        for _ in range(p.cohort_size):  # held out from adapter training; matched MIA controls
            add(text=f"cohort {j} note: {_sentence(d)}", split="control", cohort=j)
    return Corpus(docs), sorted(request)
