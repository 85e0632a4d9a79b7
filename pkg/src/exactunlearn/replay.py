"""Exact path: filtered WAL replay, the preserved-graph retain-only oracle and equality proofs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Container, Iterable

import numpy as np

from .corpus import Corpus
from .dettrain.checkpoint import FORMAT_VERSION, model_hash, opt_hash, state_hash
from .dettrain.model import ModelParams, microbatch_grad
from .dettrain.optim import OptState, TrainConfig, adamw_update
from .dettrain.trainer import add_into, reduce_microbatch
from .wal import IdManifest, WalIntegrityError, WalLog


class PinDriftError(RuntimeError):
    """Checkpoint and WAL were produced under different pins; replay refuses to run."""


class ReplayAssertionError(RuntimeError):
    pass


class StructuralMismatchError(ValueError):
    pass


@dataclass
class ReplayReport:
    applied_steps: int = 0
    empty_logical_steps: int = 0
    logical_range: tuple[int, int] | None = None
    wal_segment_digest: str = ""
    final_state_hash: str = ""
    lr_trace: list[tuple[int, float]] = field(default_factory=list)

    @property
    def traversed(self) -> int:
        if self.logical_range is None:
            return 0
        return self.logical_range[1] - self.logical_range[0] + 1

    def to_json(self) -> dict:
        d = asdict(self)
        d["logical_range"] = list(self.logical_range) if self.logical_range else None
        d["lr_trace"] = [list(x) for x in self.lr_trace]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ReplayReport":
        d = dict(d)
        d["logical_range"] = tuple(d["logical_range"]) if d["logical_range"] else None
        d["lr_trace"] = [tuple(x) for x in d["lr_trace"]]
        return cls(**d)


def check_pins(ckpt_meta: dict, wal: WalLog) -> TrainConfig:
    """Refuse to replay across format/config drift; returns the pinned config."""
    run = wal.run_meta
    for key in ("format_version", "config_digest"):
        if key not in ckpt_meta or key not in run:
            raise PinDriftError(f"pin {key!r} missing")
        if ckpt_meta[key] != run[key]:
            raise PinDriftError(f"pin {key!r} differs: checkpoint {ckpt_meta[key]!r} vs WAL {run[key]!r}")
    if run["format_version"] != FORMAT_VERSION:
        raise PinDriftError(f"WAL written by checkpoint format {run['format_version']}")
    if "corpus_digest" in ckpt_meta and ckpt_meta.get("corpus_digest") != run.get("corpus_digest"):
        raise PinDriftError("corpus digest differs")
    cfg = TrainConfig.from_json(run["config"])
    if cfg.digest() != run["config_digest"]:
        raise PinDriftError("WAL config echo does not match its digest")
    return cfg


def _prepare(ckpt, wal: WalLog, manifest: IdManifest | None):
    params, opt, meta = ckpt
    rep = wal.verify()
    if not rep.ok:
        raise WalIntegrityError(f"WAL integrity failure: {rep.first_failure}")
    cfg = check_pins(meta, wal)
    start = int(meta.get("logical_step", opt.step))
    if manifest is None:
        manifest = wal.manifest()
    return params.copy(), opt.copy(), cfg, start, manifest


def replay_filter(ckpt: tuple[ModelParams, OptState, dict], wal: WalLog, corpus: Corpus,
                  closure: Container[int] = frozenset(), manifest: IdManifest | None = None,
                  steps: int | None = None, reduction: str | None = None,
                  skip_empty: bool = True) -> tuple[ModelParams, OptState, ReplayReport]:
    """Replay the WAL tail from a checkpoint, dropping closure ids from each microbatch.

    Learning rates come from the records (no scheduler); logical steps
    whose microbatches all empty apply nothing and advance no counter.
    ``skip_empty=False`` is a test hook that applies a zero-gradient
    update instead.
    """
    params, opt, cfg, start, manifest = _prepare(ckpt, wal, manifest)
    reduction = reduction or cfg.reduction
    report = ReplayReport(wal_segment_digest=wal.digest())
    skipped = 0
    G = None
    had_contrib = False
    first = last = None
    stop = None if steps is None else start + steps
    for group in wal.read_tail(start, verified=True):
        step_idx = group[0].opt_step_u32
        if stop is not None and step_idx >= stop:
            break
        for rec in group:
            ids = manifest.lookup(rec.hash64)
            if len(ids) != rec.mb_len_u16:
                raise ReplayAssertionError(
                    f"manifest length {len(ids)} != mb_len {rec.mb_len_u16} at step {rec.opt_step_u32}")
            kept = [i for i in ids if i not in closure]
            if kept:
                g = microbatch_grad(params, cfg.model, corpus, kept, rec.seed64, cfg.dropout).grad
                G = add_into(G, reduce_microbatch(g, reduction, len(kept)))
                had_contrib = True
            if rec.accum_end_u8:
                first = rec.opt_step_u32 if first is None else first
                last = rec.opt_step_u32
                if had_contrib or not skip_empty:
                    if G is None:
                        G = {k: np.zeros_like(v) for k, v in params.items()}
                    expected = rec.opt_step_u32 - skipped - (start - ckpt[1].step)
                    if opt.step != expected:
                        raise ReplayAssertionError(
                            f"optimizer step {opt.step} != expected {expected} at logical step {rec.opt_step_u32}")
                    params, opt = adamw_update(params, opt, G, rec.lr_f32, cfg)
                    report.lr_trace.append((opt.step - 1, rec.lr_f32))
                    report.applied_steps += 1
                else:
                    skipped += 1
                    report.empty_logical_steps += 1
                G = None
                had_contrib = False
    report.logical_range = None if first is None else (first, last)
    report.final_state_hash = state_hash(params, opt)
    return params, opt, report


def oracle_retain_train(ckpt: tuple[ModelParams, OptState, dict], wal: WalLog, corpus: Corpus,
                        closure: Iterable[int] = (), manifest: IdManifest | None = None,
                        steps: int | None = None, reduction: str | None = None,
                        masked_mean: bool = False) -> tuple[ModelParams, OptState, ReplayReport]:
    """Retain-only training over the WAL's preserved microbatch graph.

    Built separately from replay_filter: the whole graph is materialised
    first as retain-membership lists, then executed. With
    ``masked_mean`` the mean denominator is the original slot count, as a
    masked/padded retain-only loader would produce.
    """
    params, opt, cfg, start, manifest = _prepare(ckpt, wal, manifest)
    reduction = reduction or cfg.reduction
    retain = set(corpus.training_ids()) - set(closure)

    graph = []
    for group in wal.read_tail(start, verified=True):
        if steps is not None and group[0].opt_step_u32 >= start + steps:
            break
        slots = []
        for rec in group:
            ids = manifest.lookup(rec.hash64)
            if len(ids) != rec.mb_len_u16:
                raise ReplayAssertionError("manifest length mismatch")
            slots.append(([i for i in ids if i in retain], rec.seed64, rec.mb_len_u16))
        graph.append((group[-1].opt_step_u32, group[-1].lr_f32, slots))

    report = ReplayReport(wal_segment_digest=wal.digest())
    if graph:
        report.logical_range = (graph[0][0], graph[-1][0])
    for logical, lr, slots in graph:
        live = [s for s in slots if s[0]]
        if not live:
            report.empty_logical_steps += 1
            continue
        G = None
        for kept, seed, n_slots in live:
            g = microbatch_grad(params, cfg.model, corpus, kept, seed, cfg.dropout).grad
            denom = n_slots if masked_mean else len(kept)
            G = add_into(G, reduce_microbatch(g, reduction, denom))
        report.lr_trace.append((opt.step, lr))
        params, opt = adamw_update(params, opt, G, lr, cfg)
        report.applied_steps += 1
    report.final_state_hash = state_hash(params, opt)
    return params, opt, report


# --- equality proof --------------------------------------------------------

@dataclass
class EqualityProof:
    status: str
    model_hash_oracle: str
    model_hash_replay: str
    opt_hash_oracle: str
    opt_hash_replay: str
    component_equality: dict
    replay_invariants: ReplayReport
    oracle_invariants: ReplayReport
    wal_sha256: str
    max_abs_diff: float = 0.0

    @property
    def passed(self) -> bool:
        return self.status == "PASS"

    def to_json(self) -> dict:
        d = asdict(self)
        d["replay_invariants"] = self.replay_invariants.to_json()
        d["oracle_invariants"] = self.oracle_invariants.to_json()
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, d: dict) -> "EqualityProof":
        d = dict(d)
        d["replay_invariants"] = ReplayReport.from_json(d["replay_invariants"])
        d["oracle_invariants"] = ReplayReport.from_json(d["oracle_invariants"])
        return cls(**d)


def _bits_equal(a: dict, b: dict) -> bool:
    return all(a[k].tobytes() == b[k].tobytes() for k in a)


def max_abs_diff(a: dict, b: dict) -> float:
    return max(float(np.max(np.abs(a[k].astype(np.float64) - b[k].astype(np.float64)))) for k in a)


def prove_equality(replay: tuple[ModelParams, OptState, ReplayReport],
                   oracle: tuple[ModelParams, OptState, ReplayReport], wal_digest: str) -> EqualityProof:
    rp, ro, rrep = replay
    op, oo, orep = oracle
    if list(rp) != list(op) or any(rp[k].shape != op[k].shape or rp[k].dtype != op[k].dtype for k in rp):
        raise StructuralMismatchError("parameter shape tables differ")
    if any(ro.exp_avg[k].shape != oo.exp_avg[k].shape for k in ro.exp_avg):
        raise StructuralMismatchError("optimizer shape tables differ")
    comp = {
        "exp_avg": _bits_equal(ro.exp_avg, oo.exp_avg),
        "exp_avg_sq": _bits_equal(ro.exp_avg_sq, oo.exp_avg_sq),
        "step": ro.step == oo.step,
    }
    mh = (model_hash(op), model_hash(rp))
    oh = (opt_hash(oo), opt_hash(ro))
    ok = mh[0] == mh[1] and oh[0] == oh[1] and all(comp.values())
    return EqualityProof("PASS" if ok else "FAIL", mh[0], mh[1], oh[0], oh[1], comp, rrep, orep,
                         wal_digest, max_abs_diff(rp, op))


def mean_reduction_counterexample(ckpt, wal: WalLog, corpus: Corpus, closure: Iterable[int],
                                  manifest: IdManifest | None = None, steps: int | None = None,
                                  reduction: str = "mean") -> dict:
    """Filtered replay vs the masked retain-only program under the given reduction.

    Under mean the two denominators (post-filter count vs slot count)
    disagree whenever filtering changes a microbatch's cardinality.
    """
    closure = set(closure)
    rp, ro, _ = replay_filter(ckpt, wal, corpus, closure, manifest, steps, reduction)
    op, oo, _ = oracle_retain_train(ckpt, wal, corpus, closure, manifest, steps, reduction,
                                    masked_mean=True)
    return {"reduction": reduction, "max_abs_diff": max_abs_diff(rp, op),
            "bit_identical": state_hash(rp, ro) == state_hash(op, oo)}
