"""Toy next-token model: concatenated context embeddings -> dense(tanh) -> dense -> softmax.

All tensors are float32. Each example is processed on its own and its
gradient is added into the microbatch accumulator in id order, so the
bits contributed by an example never depend on which neighbours share its
microbatch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from ..corpus import BOS, EOS, VOCAB_SIZE, Corpus
from ..rng import OP_DROPOUT, OP_INIT, normal_array, uniform_array

F32 = np.float32
PARAM_NAMES = ("embed", "w1", "b1", "w2", "b2")


class NumericFault(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = VOCAB_SIZE
    context_len: int = 8
    embed_dim: int = 16
    hidden: int = 64

    def shapes(self) -> dict[str, tuple[int, ...]]:
        c, d, h, v = self.context_len, self.embed_dim, self.hidden, self.vocab_size
        return {"embed": (v, d), "w1": (c * d, h), "b1": (h,), "w2": (h, v), "b2": (v,)}


class ModelParams(dict):
    """Ordered name -> float32 tensor mapping in PARAM_NAMES order."""

    def __init__(self, tensors: Mapping[str, np.ndarray], cfg: ModelConfig):
        super().__init__((k, np.ascontiguousarray(tensors[k], dtype=F32)) for k in PARAM_NAMES)
        self.cfg = cfg

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.items()}, self.cfg)

    def to_bytes(self) -> bytes:
        return b"".join(self[k].astype("<f4", copy=False).tobytes() for k in PARAM_NAMES)

    def num_params(self) -> int:
        return sum(v.size for v in self.values())

    def zeros_like(self) -> "ModelParams":
        return ModelParams({k: np.zeros_like(v) for k, v in self.items()}, self.cfg)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    shapes = cfg.shapes()
    t = {}
    for n, name in enumerate(PARAM_NAMES):
        shp = shapes[name]
        if name.startswith("b"):
            t[name] = np.zeros(shp, F32)
            continue
        fan_in = shp[0] if name != "embed" else 1
        scale = F32(0.5 if name == "embed" else 1.0 / np.sqrt(fan_in))
        t[name] = normal_array(seed, n, shp, OP_INIT) * scale
    return ModelParams(t, cfg)


def contexts(tokens: np.ndarray, context_len: int) -> tuple[np.ndarray, np.ndarray]:
    """(n, C) context windows and (n,) targets; the document ends with EOS."""
    padded = np.concatenate([np.full(context_len, BOS, np.int64), tokens, [EOS]])
    n = len(tokens) + 1
    idx = np.arange(n)[:, None] + np.arange(context_len)[None, :]
    return padded[idx], padded[context_len:context_len + n]


@dataclass(frozen=True)
class Dropout:
    rate: float
    seed64: int


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def example_forward_backward(w: Mapping[str, np.ndarray], cfg: ModelConfig, doc_id: int,
                             tokens: np.ndarray, dropout: Dropout | None = None,
                             need_grad: bool = True):
    """Per-token losses (float32) and, if asked, the summed gradient of one example."""
    ctx, tgt = contexts(tokens, cfg.context_len)
    n = len(tgt)
    x = w["embed"][ctx].reshape(n, -1)
    z1 = x @ w["w1"] + w["b1"]
    h = np.tanh(z1)
    mask = None
    if dropout is not None and dropout.rate > 0:
        u = uniform_array(dropout.seed64, doc_id, np.arange(n)[:, None], OP_DROPOUT,
                          np.arange(cfg.hidden)[None, :])
        mask = (u >= F32(dropout.rate)).astype(F32) / F32(1.0 - dropout.rate)
        h = h * mask
    logits = h @ w["w2"] + w["b2"]
    logp = _log_softmax(logits)
    tok_loss = -logp[np.arange(n), tgt]
    if not need_grad:
        return tok_loss, None
    dlogits = np.exp(logp)
    dlogits[np.arange(n), tgt] -= F32(1.0)
    g = {
        "w2": h.T @ dlogits,
        "b2": dlogits.sum(axis=0),
    }
    dh = dlogits @ w["w2"].T
    if mask is not None:
        dh = dh * mask
    dz1 = dh * (F32(1.0) - np.tanh(z1) ** 2)
    g["w1"] = x.T @ dz1
    g["b1"] = dz1.sum(axis=0)
    dx = (dz1 @ w["w1"].T).reshape(n, cfg.context_len, cfg.embed_dim)
    demb = np.zeros_like(w["embed"])
    np.add.at(demb, ctx, dx)
    g["embed"] = demb
    return tok_loss, g


def seq_sum(values: np.ndarray) -> float:
    """Left-to-right float64 sum (cumsum is strictly sequential)."""
    if len(values) == 0:
        return 0.0
    return float(np.cumsum(np.asarray(values, dtype=np.float64))[-1])


@dataclass
class MicrobatchResult:
    loss: float
    per_example: list[float]
    grad: dict[str, np.ndarray] | None


def microbatch_grad(w: Mapping[str, np.ndarray], cfg: ModelConfig, corpus: Corpus,
                    ids: Sequence[int], seed64: int = 0, dropout_rate: float = 0.0,
                    need_grad: bool = True, fault: Callable[[dict], None] | None = None
                    ) -> MicrobatchResult:
    """Sum-reduction loss and gradient over an ordered microbatch.

    Per-example gradients are added into a zero accumulator in the given
    order; the loss is the sequential float64 sum of per-example sums.
    """
    if len(ids) == 0:
        raise ValueError("empty microbatch")
    drop = Dropout(dropout_rate, seed64) if dropout_rate > 0 else None
    acc = {k: np.zeros_like(w[k]) for k in PARAM_NAMES} if need_grad else None
    per_ex = []
    for doc_id in ids:
        tok_loss, g = example_forward_backward(w, cfg, doc_id, corpus.tokens(doc_id), drop, need_grad)
        per_ex.append(seq_sum(tok_loss))
        if need_grad:
            for k in PARAM_NAMES:
                acc[k] += g[k]
    if need_grad:
        if fault is not None:
            fault(acc)
        for k in PARAM_NAMES:
            if not np.all(np.isfinite(acc[k])):
                raise NumericFault(f"non-finite gradient in {k}")
    return MicrobatchResult(seq_sum(np.array(per_ex)), per_ex, acc)


def forward_loss_sum(params: Mapping[str, np.ndarray], corpus: Corpus, ids: Sequence[int]
                     ) -> tuple[float, list[float]]:
    r = microbatch_grad(params, params.cfg, corpus, ids, need_grad=False)
    return r.loss, r.per_example


def grad(params: ModelParams, corpus: Corpus, ids: Sequence[int], seed64: int,
         dropout_rate: float = 0.0) -> dict[str, np.ndarray]:
    return microbatch_grad(params, params.cfg, corpus, ids, seed64, dropout_rate).grad


# --- batched evaluation (audits only; not on the bit-exact path) -------------

def next_logprobs(w: Mapping[str, np.ndarray], cfg: ModelConfig, ctx: np.ndarray) -> np.ndarray:
    """Log-probabilities of the next token for each (C,) context row."""
    x = w["embed"][ctx].reshape(len(ctx), -1)
    h = np.tanh(x @ w["w1"] + w["b1"])
    return _log_softmax(h @ w["w2"] + w["b2"])


def token_nll(w: Mapping[str, np.ndarray], cfg: ModelConfig, tokens: np.ndarray) -> np.ndarray:
    ctx, tgt = contexts(tokens, cfg.context_len)
    lp = next_logprobs(w, cfg, ctx)
    return -lp[np.arange(len(tgt)), tgt]
