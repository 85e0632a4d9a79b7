"""Bit-exact checkpoints of (params, optimizer state) and the state hash."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from ..sealed import CorruptionError, VersionMismatchError, atomic_write, pack, unpack
from .model import PARAM_NAMES, ModelConfig, ModelParams
from .optim import OptState

MAGIC = b"XUCK"
FORMAT_VERSION = 1

__all__ = ["CorruptionError", "VersionMismatchError", "checkpoint_bytes", "checkpoint_save",
           "checkpoint_load", "state_hash", "model_hash", "opt_hash", "states_equal"]


def state_bytes(params: ModelParams, opt: OptState) -> bytes:
    return params.to_bytes() + opt.to_bytes()


def state_hash(params: ModelParams, opt: OptState) -> str:
    return hashlib.sha256(state_bytes(params, opt)).hexdigest()


def model_hash(params) -> str:
    return hashlib.sha256(b"".join(params[k].astype("<f4", copy=False).tobytes() for k in params)).hexdigest()


def opt_hash(opt: OptState) -> str:
    return hashlib.sha256(opt.to_bytes()).hexdigest()


def states_equal(a: tuple[ModelParams, OptState], b: tuple[ModelParams, OptState]) -> bool:
    return state_bytes(*a) == state_bytes(*b)


def checkpoint_bytes(params: ModelParams, opt: OptState, meta: dict | None = None) -> bytes:
    header = {
        "model": {"context_len": params.cfg.context_len, "embed_dim": params.cfg.embed_dim,
                  "hidden": params.cfg.hidden, "vocab_size": params.cfg.vocab_size},
        "tensors": [[k, list(params[k].shape)] for k in PARAM_NAMES],
        "opt_step": int(opt.step),
        "meta": meta or {},
    }
    return pack(MAGIC, FORMAT_VERSION, header, state_bytes(params, opt))


def checkpoint_save(path: str | Path, params: ModelParams, opt: OptState, meta: dict | None = None) -> str:
    """Write the checkpoint atomically; returns its state hash."""
    atomic_write(path, checkpoint_bytes(params, opt, meta))
    return state_hash(params, opt)


def checkpoint_from_bytes(data: bytes) -> tuple[ModelParams, OptState, dict]:
    header, body = unpack(data, MAGIC, FORMAT_VERSION)
    cfg = ModelConfig(**header["model"])
    shapes = [(k, tuple(s)) for k, s in header["tensors"]]
    expected = sum(4 * int(np.prod(s)) for _, s in shapes) * 3 + 8
    if len(body) != expected:
        raise CorruptionError(f"body length {len(body)} != {expected}")
    off = 0

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape)
        off += 4 * n
        return arr

    params = {k: take(s) for k, s in shapes}
    step = int.from_bytes(body[off:off + 8], "little")
    off += 8
    m = {k: take(s) for k, s in shapes}
    v = {k: take(s) for k, s in shapes}
    if step != header["opt_step"]:
        raise CorruptionError("optimizer step disagrees with header")
    return ModelParams(params, cfg), OptState(m, v, step), header["meta"]


def checkpoint_load(path: str | Path) -> tuple[ModelParams, OptState, dict]:
    return checkpoint_from_bytes(Path(path).read_bytes())
