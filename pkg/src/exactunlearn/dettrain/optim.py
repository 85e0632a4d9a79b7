"""AdamW with decoupled weight decay, global-norm clipping and the warmup+cosine schedule."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .model import F32, ModelConfig, ModelParams, NumericFault


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 3e-3
    warmup_steps: int = 10
    total_steps: int = 200
    cosine_floor: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    accum_len: int = 2
    microbatch_size: int = 8
    master_seed: int = 1234
    reduction: str = "sum"
    dropout: float = 0.0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.accum_len < 1 or self.microbatch_size < 1:
            raise ValueError("accum_len and microbatch_size must be >= 1")
        if not 0 < self.microbatch_size <= 0xFFFF:
            raise ValueError("microbatch_size must fit in u16")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["betas"] = tuple(d["betas"])
        d["model"] = ModelConfig(**d["model"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


@dataclass
class OptState:
    exp_avg: dict[str, np.ndarray]
    exp_avg_sq: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)

    def copy(self) -> "OptState":
        return OptState({k: v.copy() for k, v in self.exp_avg.items()},
                        {k: v.copy() for k, v in self.exp_avg_sq.items()}, self.step)

    def to_bytes(self) -> bytes:
        parts = [int(self.step).to_bytes(8, "little")]
        parts += [self.exp_avg[k].astype("<f4", copy=False).tobytes() for k in self.exp_avg]
        parts += [self.exp_avg_sq[k].astype("<f4", copy=False).tobytes() for k in self.exp_avg_sq]
        return b"".join(parts)


def lr_at(index: int, cfg: TrainConfig) -> float:
    """Learning rate for the given applied-update index, rounded to float32."""
    T, W = cfg.total_steps, cfg.warmup_steps
    if not 0 <= index < T:
        raise IndexError(f"update index {index} outside [0, {T})")
    if index < W:
        lr = cfg.base_lr * index / W
    else:
        progress = (index - W) / max(1, T - W)
        lr = cfg.cosine_floor + (cfg.base_lr - cfg.cosine_floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
    return float(np.float32(lr))


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for k in grads:
        g = grads[k].ravel().astype(np.float64)
        total += float(np.dot(g, g))
    return math.sqrt(total)


def clip_grads(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        coef = F32(max_norm / (norm + 1e-6))
        return {k: g * coef for k, g in grads.items()}
    return dict(grads)


def adamw_update(params: Mapping[str, np.ndarray], opt: OptState, grads: Mapping[str, np.ndarray],
                 lr: float, cfg: TrainConfig, clip: bool = True):
    """One AdamW step; returns new (params, opt) and leaves the inputs untouched."""
    g = clip_grads(grads, cfg.grad_clip) if clip else dict(grads)
    b1, b2 = cfg.betas
    step = opt.step + 1
    lr32 = F32(lr)
    decay = lr32 * F32(cfg.weight_decay)
    bc1 = F32(1.0 - b1 ** step)
    bc2_sqrt = F32(math.sqrt(1.0 - b2 ** step))
    step_size = lr32 / bc1
    new_p, new_m, new_v = {}, {}, {}
    for k in params:
        p = params[k]
        p = p - decay * p
        m = F32(b1) * opt.exp_avg[k] + F32(1.0 - b1) * g[k]
        v = F32(b2) * opt.exp_avg_sq[k] + F32(1.0 - b2) * (g[k] * g[k])
        denom = np.sqrt(v) / bc2_sqrt + F32(cfg.eps)
        p = p - step_size * (m / denom)
        if not np.all(np.isfinite(p)):
            raise NumericFault(f"non-finite parameter {k} after update")
        new_p[k], new_m[k], new_v[k] = p, m, v
    out = ModelParams(new_p, params.cfg) if isinstance(params, ModelParams) else new_p
    return out, OptState(new_m, new_v, step)
