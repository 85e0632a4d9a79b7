"""Deterministic training loop that writes the microbatch WAL."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from ..corpus import Corpus
from .checkpoint import FORMAT_VERSION, checkpoint_save
from .model import F32, ModelParams, init_params, microbatch_grad
from .optim import OptState, TrainConfig, adamw_update, lr_at
from ..rng import OP_MB_SEED, OP_SAMPLER, key_hash


def epoch_order(ids: Sequence[int], seed: int, epoch: int) -> list[int]:
    """Membership-independent order: each id sorts by its own counter hash."""
    return sorted(ids, key=lambda i: (key_hash(seed, i, epoch, OP_SAMPLER), i))


def microbatch_seed(master_seed: int, step: int, index: int) -> int:
    return key_hash(master_seed, step, index, OP_MB_SEED)


def microbatch_plan(ids: Sequence[int], cfg: TrainConfig, steps: int | None = None
                    ) -> Iterator[tuple[int, int, list[int], int]]:
    """(logical step, microbatch index, ordered ids, seed64) for every microbatch."""
    steps = cfg.total_steps if steps is None else steps
    if not ids:
        raise ValueError("empty training corpus")
    B, m = cfg.microbatch_size, cfg.accum_len
    stream: list[int] = []
    epoch = 0
    for t in range(steps):
        for i in range(m):
            while len(stream) < B:
                stream.extend(epoch_order(ids, cfg.master_seed, epoch))
                epoch += 1
            mb, stream = stream[:B], stream[B:]
            yield t, i, mb, microbatch_seed(cfg.master_seed, t, i)


def add_into(acc: dict[str, np.ndarray] | None, g: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """acc += g, starting from an explicit zero accumulator so signed zeros behave the same everywhere."""
    if acc is None:
        acc = {k: np.zeros_like(v) for k, v in g.items()}
    for k in g:
        acc[k] += g[k]
    return acc


def reduce_microbatch(grad: dict[str, np.ndarray], reduction: str, denominator: int) -> dict[str, np.ndarray]:
    if reduction == "sum":
        return grad
    d = F32(denominator)
    return {k: v / d for k, v in grad.items()}


@dataclass
class CheckpointPolicy:
    every: int = 0
    at_steps: tuple[int, ...] = ()
    directory: Path | None = None
    keep_in_memory: bool = True
    final: bool = True

    def wants(self, step: int, total: int) -> bool:
        if step in self.at_steps:
            return True
        if self.every and step % self.every == 0 and step < total:
            return True
        return self.final and step == total


@dataclass
class TrainRunResult:
    params: ModelParams
    opt: OptState
    checkpoints: dict[int, object] = field(default_factory=dict)
    lrs: list[float] = field(default_factory=list)
    wal_records: int = 0


def run_meta(cfg: TrainConfig, corpus: Corpus | None = None) -> dict:
    from .. import __version__
    meta = {
        "format_version": FORMAT_VERSION,
        "package_version": __version__,
        "config": cfg.to_json(),
        "config_digest": cfg.digest(),
        "grad_clip": cfg.grad_clip,
        "master_seed": cfg.master_seed,
        "reduction": cfg.reduction,
    }
    if corpus is not None:
        meta["corpus_digest"] = corpus.digest()
    return meta


def train(corpus: Corpus, cfg: TrainConfig, wal=None, ckpt_policy: CheckpointPolicy | None = None,
          ring=None, init: tuple[ModelParams, OptState] | None = None,
          fault: Callable[[dict], None] | None = None,
          on_step: Callable[[int, ModelParams, OptState], None] | None = None) -> TrainRunResult:
    """Run cfg.total_steps logical steps of cfg.accum_len microbatches each.

    Emits one WAL record per microbatch before the update it feeds, applies
    AdamW with lr_at(opt.step), and optionally checkpoints and captures
    per-step ring deltas. ``fault`` is a test hook that can perturb each
    microbatch gradient.
    """
    if init is None:
        params = init_params(cfg.model, cfg.master_seed)
        opt = OptState.zeros(params)
    else:
        params, opt = init[0].copy(), init[1].copy()
    policy = ckpt_policy or CheckpointPolicy(final=False, keep_in_memory=False)
    meta = run_meta(cfg, corpus)
    result = TrainRunResult(params, opt)
    ids = corpus.training_ids()
    T = cfg.total_steps

    def maybe_checkpoint(t: int) -> None:
        if not policy.wants(t, T):
            return
        m = dict(meta, logical_step=t)
        if policy.directory is not None:
            path = Path(policy.directory) / f"ckpt-{t:06d}.bin"
            checkpoint_save(path, params, opt, m)
            result.checkpoints[t] = path
        elif policy.keep_in_memory:
            result.checkpoints[t] = (params.copy(), opt.copy(), m)

    G = None
    lr = 0.0
    for t, i, mb, seed in microbatch_plan(ids, cfg, T):
        if i == 0:
            maybe_checkpoint(t)
            G = None
            lr = lr_at(opt.step, cfg)
        accum_end = i == cfg.accum_len - 1
        if wal is not None:
            wal.emit_record(mb, seed, lr, opt.step, accum_end)
            result.wal_records += 1
        r = microbatch_grad(params, cfg.model, corpus, mb, seed, cfg.dropout, fault=fault)
        G = add_into(G, reduce_microbatch(r.grad, cfg.reduction, len(mb)))
        if accum_end:
            pre = (params, opt)
            params, opt = adamw_update(params, opt, G, lr, cfg)
            result.lrs.append(lr)
            if ring is not None:
                ring.capture(pre[0], pre[1], params, opt, t)
            if on_step is not None:
                on_step(t, params, opt)
    maybe_checkpoint(T)
    result.params, result.opt = params, opt
    return result
