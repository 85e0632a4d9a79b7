"""Cohort-scoped low-rank adapters on a frozen base: train, serve, delete and compact."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import Corpus
from .dettrain.checkpoint import model_hash
from .dettrain.model import F32, ModelParams, microbatch_grad
from .dettrain.optim import OptState, TrainConfig, adamw_update, lr_at
from .dettrain.trainer import add_into, microbatch_plan, reduce_microbatch
from .rng import OP_ADAPTER_INIT, normal_array
from .sealed import atomic_write, pack, unpack

ADAPTER_MAGIC = b"XUAD"
ADAPTER_VERSION = 1
DEFAULT_RANKS = {"w1": 8, "w2": 4}  # attention-analog on layer 1, mlp-analog on layer 2


class FreezeViolation(RuntimeError):
    """Base parameters changed while an adapter was training."""


class AdapterError(RuntimeError):
    pass


class AdapterNotFound(AdapterError, KeyError):
    pass


class EscalateToReplay(AdapterError):
    """The cohort cannot be removed by deletion (merged or compacted)."""


@dataclass
class Adapter:
    cohort_id: int
    factors: dict[str, tuple[np.ndarray, np.ndarray]]  # layer -> (A: in x r, B: out x r)
    merged: bool = False
    members: tuple[int, ...] = ()
    base_hash: str = ""

    def __post_init__(self):
        if not self.members:
            self.members = (self.cohort_id,)

    @property
    def deletable(self) -> bool:
        return len(self.members) == 1 and not self.merged

    def rank(self, layer: str) -> int:
        return self.factors[layer][0].shape[1]

    def contribution(self, layer: str) -> np.ndarray:
        """P = A·Bᵀ, accumulated in float64 and rounded once to float32."""
        A, B = self.factors[layer]
        return (A.astype(np.float64) @ B.astype(np.float64).T).astype(F32)

    def num_params(self) -> int:
        return sum(A.size + B.size for A, B in self.factors.values())

    def to_bytes(self) -> bytes:
        layers = sorted(self.factors)
        hdr = {"cohort_id": self.cohort_id, "merged": self.merged, "members": list(self.members),
               "base_hash": self.base_hash,
               "layers": [[k, list(self.factors[k][0].shape), list(self.factors[k][1].shape)] for k in layers]}
        body = b"".join(self.factors[k][0].astype("<f4").tobytes() + self.factors[k][1].astype("<f4").tobytes()
                        for k in layers)
        return pack(ADAPTER_MAGIC, ADAPTER_VERSION, hdr, body)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Adapter":
        hdr, body = unpack(data, ADAPTER_MAGIC, ADAPTER_VERSION)
        factors, off = {}, 0
        for name, sa, sb in hdr["layers"]:
            mats = []
            for shp in (sa, sb):
                n = int(np.prod(shp))
                mats.append(np.frombuffer(body, "<f4", n, off).reshape(shp).astype(F32))
                off += 4 * n
            factors[name] = (mats[0], mats[1])
        return cls(hdr["cohort_id"], factors, hdr["merged"], tuple(hdr["members"]), hdr["base_hash"])

    def save(self, path: str | Path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Adapter":
        return cls.from_bytes(Path(path).read_bytes())


def init_adapter(base: ModelParams, cohort_id: int, ranks: dict[str, int] = DEFAULT_RANKS,
                 seed: int = 0) -> Adapter:
    """A ~ N(0, 1/in) from the counter RNG, B = 0, so the initial contribution is zero."""
    factors = {}
    for n, (layer, r) in enumerate(sorted(ranks.items())):
        d_in, d_out = base[layer].shape
        A = normal_array(seed ^ cohort_id, n, (d_in, r), OP_ADAPTER_INIT) * F32(1.0 / np.sqrt(d_in))
        factors[layer] = (A.astype(F32), np.zeros((d_out, r), F32))
    return Adapter(cohort_id, factors, base_hash=model_hash(base))


def compose(base: ModelParams, adapters: Iterable[Adapter]) -> ModelParams:
    """Base plus adapter contributions, in ascending cohort id, one layer at a time."""
    out = {k: v.copy() for k, v in base.items()}
    for ad in sorted(adapters, key=lambda a: a.cohort_id):
        for layer in sorted(ad.factors):
            out[layer] = out[layer] + ad.contribution(layer)
    return ModelParams(out, base.cfg)


def _factor_grads(ad: Adapter, gW: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    g = {}
    for layer, (A, B) in ad.factors.items():
        G = gW[layer]
        g[f"{layer}.A"] = (G @ B).astype(F32)
        g[f"{layer}.B"] = (G.T @ A).astype(F32)
    return g


def _flat(ad: Adapter) -> dict[str, np.ndarray]:
    out = {}
    for layer in sorted(ad.factors):
        out[f"{layer}.A"], out[f"{layer}.B"] = ad.factors[layer]
    return out


def _unflat(ad: Adapter, flat: dict[str, np.ndarray]) -> Adapter:
    f = {layer: (flat[f"{layer}.A"], flat[f"{layer}.B"]) for layer in ad.factors}
    return Adapter(ad.cohort_id, f, ad.merged, ad.members, ad.base_hash)


def train_adapter(base: ModelParams, adapter: Adapter, corpus: Corpus, ids: Sequence[int],
                  cfg: TrainConfig, steps: int | None = None,
                  others: Sequence[Adapter] = ()) -> Adapter:
    """AdamW on the adapter factors only; the base and ``others`` are read-only."""
    steps = cfg.total_steps if steps is None else steps
    flat = {k: v.copy() for k, v in _flat(adapter).items()}
    opt = OptState({k: np.zeros_like(v) for k, v in flat.items()},
                   {k: np.zeros_like(v) for k, v in flat.items()}, 0)
    if steps == 0:
        return adapter
    cfg = replace(cfg, total_steps=steps, warmup_steps=min(cfg.warmup_steps, steps))
    G = None
    for t, i, mb, seed in microbatch_plan(list(ids), cfg, steps):
        ad = _unflat(adapter, flat)
        w = compose(base, [*others, ad])
        r = microbatch_grad(w, base.cfg, corpus, mb, seed, cfg.dropout)
        G = add_into(G, reduce_microbatch(_factor_grads(ad, r.grad), cfg.reduction, len(mb)))
        if i == cfg.accum_len - 1:
            flat, opt = adamw_update(flat, opt, G, lr_at(opt.step, cfg), cfg)
            G = None
    return _unflat(adapter, flat)


@dataclass
class RegistryEntry:
    adapter: Adapter
    path: str | None = None
    manifest: dict = field(default_factory=dict)


class AdapterRegistry:
    """Cohort id -> adapter; mutations journaled so an interrupted delete is detectable."""

    def __init__(self, base: ModelParams, directory: str | Path | None = None):
        self.base = base
        self.base_hash = model_hash(base)
        self.directory = Path(directory) if directory is not None else None
        self.entries: dict[int, RegistryEntry] = {}
        self.journal: list[dict] = []
        self.lost_deletability: set[int] = set()
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            self._load_state()

    # persistence
    def _state_path(self) -> Path:
        return self.directory / "registry.json"

    def _file(self, name: str) -> Path:
        # entries hold names relative to the registry directory so a workspace can be moved
        return self.directory / name

    def _persist(self) -> None:
        if self.directory is None:
            return
        state = {"base_hash": self.base_hash,
                 "entries": {str(j): {"path": e.path, "manifest": e.manifest} for j, e in self.entries.items()},
                 "journal": self.journal, "lost_deletability": sorted(self.lost_deletability)}
        atomic_write(self._state_path(), json.dumps(state, sort_keys=True, indent=1).encode())

    def _load_state(self) -> None:
        p = self._state_path()
        if not p.exists():
            return
        state = json.loads(p.read_text())
        if state["base_hash"] != self.base_hash:
            raise FreezeViolation("registry base hash differs from the supplied base")
        for j, e in state["entries"].items():
            self.entries[int(j)] = RegistryEntry(Adapter.load(self._file(e["path"])), e["path"], e["manifest"])
        self.journal = state["journal"]
        self.lost_deletability = set(state["lost_deletability"])

    # queries
    def cohorts(self) -> list[int]:
        return sorted(self.entries)

    def get(self, j: int) -> Adapter:
        if j not in self.entries:
            raise AdapterNotFound(j)
        return self.entries[j].adapter

    def serving(self) -> ModelParams:
        return compose(self.base, [e.adapter for e in self.entries.values()])

    def owner_of(self, cohort: int) -> int | None:
        for j, e in self.entries.items():
            if cohort in e.adapter.members:
                return j
        return None

    # mutations
    def add(self, adapter: Adapter, manifest: dict | None = None) -> None:
        if adapter.merged:
            raise AdapterError("merged adapters cannot be registered")
        if adapter.base_hash and adapter.base_hash != self.base_hash:
            raise FreezeViolation("adapter trained against a different base")
        for m in adapter.members:
            if self.owner_of(m) is not None:
                raise AdapterError(f"cohort {m} already registered")
        path = None
        if self.directory is not None:
            path = f"adapter-{adapter.cohort_id:04d}.bin"
            adapter.save(self._file(path))
        self.entries[adapter.cohort_id] = RegistryEntry(adapter, path, manifest or {})
        self._persist()

    def delete(self, j: int, on_manifest: Callable[[dict], None] | None = None,
               crash_after_remove: bool = False) -> dict:
        """Remove cohort j from serving; journal -> remove -> manifest append -> commit."""
        owner = self.owner_of(j)
        if owner is None:
            raise AdapterNotFound(j)
        ad = self.entries[owner].adapter
        if ad.merged or not ad.deletable or j in self.lost_deletability:
            raise EscalateToReplay(f"cohort {j} is not individually deletable; route to replay")
        if ad.base_hash and ad.base_hash != self.base_hash:
            raise EscalateToReplay("base changed since the adapter was trained")
        entry = {"op": "delete", "cohort": j, "state": "pending"}
        self.journal.append(entry)
        self._persist()
        removed = self.entries.pop(owner)
        self._persist()
        if crash_after_remove:
            raise RuntimeError("injected crash between delete and manifest append")
        record = {"action": "delete_adapter", "cohort": j, "adapter_path": removed.path,
                  "served_hash": model_hash(self.serving())}
        if on_manifest is not None:
            on_manifest(record)
        entry["state"] = "committed"
        self._persist()
        if removed.path:
            self._file(removed.path).unlink(missing_ok=True)
        return record

    def pending(self) -> list[dict]:
        return [e for e in self.journal if e["state"] == "pending"]

    def repair(self, on_manifest: Callable[[dict], None] | None = None) -> list[dict]:
        """Finish interrupted deletes: the adapter is already out, append the missing manifest entry."""
        done = []
        for e in self.pending():
            j = e["cohort"]
            if self.owner_of(j) is not None:  # crashed before removal; roll the delete forward
                self.entries.pop(self.owner_of(j))
            record = {"action": "delete_adapter", "cohort": j, "repaired": True,
                      "served_hash": model_hash(self.serving())}
            if on_manifest is not None:
                on_manifest(record)
            e["state"] = "committed"
            done.append(record)
        self._persist()
        return done

    def compact(self, cohorts: Sequence[int]) -> Adapter:
        """Fold several adapters into one by concatenating factors; members lose deletability."""
        ads = [self.get(j) for j in sorted(cohorts)]
        if any(a.merged for a in ads):
            raise AdapterError("cannot compact merged adapters")
        merged = compact_adapters(ads)
        for a in ads:
            e = self.entries.pop(a.cohort_id)
            if e.path:
                self._file(e.path).unlink(missing_ok=True)
        self.lost_deletability.update(merged.members)
        self.add(merged, {"compacted_from": list(merged.members)})
        return merged


def compact_adapters(ads: Sequence[Adapter]) -> Adapter:
    ads = sorted(ads, key=lambda a: a.cohort_id)
    if len(ads) == 1:
        a = ads[0]
        return Adapter(a.cohort_id, {k: (A.copy(), B.copy()) for k, (A, B) in a.factors.items()},
                       False, a.members, a.base_hash)
    layers = sorted(set().union(*(a.factors for a in ads)))
    factors = {}
    for layer in layers:
        parts = [a.factors[layer] for a in ads if layer in a.factors]
        factors[layer] = (np.concatenate([p[0] for p in parts], axis=1),
                          np.concatenate([p[1] for p in parts], axis=1))
    members = tuple(sorted(m for a in ads for m in a.members))
    return Adapter(ads[0].cohort_id, factors, False, members, ads[0].base_hash)


def train_cohort(base: ModelParams, corpus: Corpus, cohort_id: int, cfg: TrainConfig,
                 registry: AdapterRegistry | None = None, ranks: dict[str, int] = DEFAULT_RANKS,
                 steps: int | None = None) -> Adapter:
    """Train cohort ``cohort_id``'s adapter on its documents with the base frozen."""
    ids = [i for i in corpus.ids("cohort") if corpus.docs[i].cohort == cohort_id]
    if not ids:
        raise AdapterError(f"cohort {cohort_id} has no documents")
    before = model_hash(base)
    frozen = {k: v.copy() for k, v in base.items()}
    for v in frozen.values():
        v.setflags(write=False)
    frozen = ModelParams(frozen, base.cfg)
    ad = init_adapter(frozen, cohort_id, ranks, cfg.master_seed)
    ad = train_adapter(frozen, ad, corpus, ids, cfg, steps)
    if model_hash(base) != before or model_hash(frozen) != before:
        raise FreezeViolation(f"base changed while training cohort {cohort_id}")
    ad.base_hash = before
    if registry is not None:
        registry.add(ad, {"cohort": cohort_id, "docs": len(ids), "steps": steps if steps is not None else cfg.total_steps})
    return ad
