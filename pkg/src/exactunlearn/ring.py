"""Dense per-step delta ring buffer for exact recent reverts, plus storage budgets."""

from __future__ import annotations

import hashlib
import zlib
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .dettrain.checkpoint import state_hash
from .dettrain.model import F32, ModelParams
from .dettrain.optim import OptState
from .sealed import atomic_write, pack, unpack

PATCH_MAGIC = b"XUPT"
PATCH_VERSION = 1
XOR = "xor"
ARITH = "arith"
CODECS = ("identity", "zlib")


class RingError(RuntimeError):
    pass


class WindowExceededError(RingError):
    pass


class RingGapError(RingError):
    pass


class PatchMismatchError(RingError):
    """Patch applied to a state it was not captured against."""


def _encode(blob: bytes, codec: str) -> bytes:
    if codec == "identity":
        return blob
    if codec == "zlib":
        return zlib.compress(blob, 6)
    raise ValueError(f"unknown codec {codec!r}")


def _decode(blob: bytes, codec: str) -> bytes:
    return blob if codec == "identity" else zlib.decompress(blob)


def shape_table(params: Mapping[str, np.ndarray]) -> list[tuple[str, tuple[int, ...]]]:
    return [(k, tuple(v.shape)) for k, v in params.items()]


def shape_digest(table) -> str:
    return hashlib.sha256(repr(table).encode()).hexdigest()[:16]


def _delta(pre: np.ndarray, post: np.ndarray, mode: str) -> np.ndarray:
    if pre.shape != post.shape:
        raise ValueError(f"shape mismatch {pre.shape} vs {post.shape}")
    if mode == XOR:
        return post.view(np.uint32) ^ pre.view(np.uint32)
    return (post - pre).astype(F32)


def _undo(post: np.ndarray, d: np.ndarray, mode: str) -> np.ndarray:
    if mode == XOR:
        return (post.view(np.uint32) ^ d).view(F32)
    return (post - d).astype(F32)


@dataclass
class DeltaPatch:
    step: int
    mode: str
    codec: str
    shapes: list
    payload: bytes
    pre_compress_bytes: int
    model_bytes: int  # weights-only share of pre_compress_bytes
    step_delta: int  # optimizer counter advance (0 when optimizer not captured)
    has_opt: bool
    post_hash: str  # state the patch expects to be applied to

    @property
    def stored_bytes(self) -> int:
        return len(self.payload)

    def tensors(self) -> dict[str, np.ndarray]:
        raw = _decode(self.payload, self.codec)
        dt = np.dtype("<u4") if self.mode == XOR else np.dtype("<f4")
        out, off = {}, 0
        groups = ["p"] + (["m", "v"] if self.has_opt else [])
        for g in groups:
            for name, shape in self.shapes:
                n = int(np.prod(shape)) * 4
                out[f"{g}.{name}"] = np.frombuffer(raw, dt, n // 4, off).reshape(shape)
                off += n
        if off != len(raw):
            raise PatchMismatchError("patch payload length does not match its shape table")
        return out

    def to_bytes(self) -> bytes:
        hdr = {"step": self.step, "mode": self.mode, "codec": self.codec,
               "shapes": [[k, list(s)] for k, s in self.shapes],
               "shape_digest": shape_digest(self.shapes),
               "pre_compress_bytes": self.pre_compress_bytes, "model_bytes": self.model_bytes,
               "step_delta": self.step_delta, "has_opt": self.has_opt, "post_hash": self.post_hash}
        return pack(PATCH_MAGIC, PATCH_VERSION, hdr, self.payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "DeltaPatch":
        hdr, body = unpack(data, PATCH_MAGIC, PATCH_VERSION)
        shapes = [(k, tuple(s)) for k, s in hdr["shapes"]]
        if shape_digest(shapes) != hdr["shape_digest"]:
            raise PatchMismatchError("shape digest mismatch")
        return cls(hdr["step"], hdr["mode"], hdr["codec"], shapes, body, hdr["pre_compress_bytes"],
                   hdr["model_bytes"], hdr["step_delta"], hdr["has_opt"], hdr["post_hash"])

    def save(self, path: str | Path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "DeltaPatch":
        return cls.from_bytes(Path(path).read_bytes())


def capture_delta(pre: tuple[ModelParams, OptState | None], post: tuple[ModelParams, OptState | None],
                  t: int, mode: str = XOR, codec: str = "identity") -> DeltaPatch:
    """Patch that takes ``post`` back to ``pre``; optimizer included when both sides carry one."""
    if mode not in (XOR, ARITH):
        raise ValueError(f"unknown mode {mode!r}")
    pp, po = pre
    qp, qo = post
    if shape_table(pp) != shape_table(qp):
        raise ValueError("shape mismatch between pre and post states")
    has_opt = po is not None and qo is not None
    parts = [_delta(pp[k], qp[k], mode) for k in pp]
    model_bytes = sum(p.nbytes for p in parts)
    if has_opt:
        parts += [_delta(po.exp_avg[k], qo.exp_avg[k], mode) for k in pp]
        parts += [_delta(po.exp_avg_sq[k], qo.exp_avg_sq[k], mode) for k in pp]
    raw = b"".join(p.astype(p.dtype.newbyteorder("<"), copy=False).tobytes() for p in parts)
    post_hash = state_hash(qp, qo) if has_opt else hashlib.sha256(qp.to_bytes()).hexdigest()
    return DeltaPatch(t, mode, codec, shape_table(pp), _encode(raw, codec), len(raw), model_bytes,
                      (qo.step - po.step) if has_opt else 0, has_opt, post_hash)


def apply_patch(params: ModelParams, opt: OptState | None, patch: DeltaPatch,
                check: bool = True) -> tuple[ModelParams, OptState | None]:
    if shape_table(params) != patch.shapes:
        raise PatchMismatchError("state shape table differs from patch")
    if check and patch.mode == XOR:
        h = state_hash(params, opt) if patch.has_opt else hashlib.sha256(params.to_bytes()).hexdigest()
        if h != patch.post_hash:
            raise PatchMismatchError(f"state does not match post-state of step {patch.step}")
    d = patch.tensors()
    new_p = ModelParams({k: _undo(params[k], d[f"p.{k}"], patch.mode) for k in params}, params.cfg)
    if not patch.has_opt or opt is None:
        return new_p, opt
    new_o = OptState({k: _undo(opt.exp_avg[k], d[f"m.{k}"], patch.mode) for k in params},
                     {k: _undo(opt.exp_avg_sq[k], d[f"v.{k}"], patch.mode) for k in params},
                     opt.step - patch.step_delta)
    return new_p, new_o


class RingBuffer:
    """Last ``window`` per-step patches, oldest evicted first."""

    def __init__(self, window: int, mode: str = XOR, revert_optimizer: bool = True,
                 codec: str = "identity"):
        if window < 1:
            raise ValueError("window must be >= 1")
        if codec not in CODECS:
            raise ValueError(f"unknown codec {codec!r}")
        self.window = window
        self.mode = mode
        self.revert_optimizer = revert_optimizer
        self.codec = codec
        self.patches: deque[DeltaPatch] = deque(maxlen=window)

    def __len__(self) -> int:
        return len(self.patches)

    def steps(self) -> list[int]:
        return [p.step for p in self.patches]

    def capture(self, pre_params, pre_opt, post_params, post_opt, t: int) -> DeltaPatch:
        if self.patches and t != self.patches[-1].step + 1:
            self.patches.clear()  # a discontinuity invalidates older patches
        o = (pre_opt, post_opt) if self.revert_optimizer else (None, None)
        patch = capture_delta((pre_params, o[0]), (post_params, o[1]), t, self.mode, self.codec)
        self.patches.append(patch)
        return patch

    def revert(self, params: ModelParams, opt: OptState | None, u: int,
               pop: bool = False) -> tuple[ModelParams, OptState | None]:
        """Undo the newest ``u`` steps, newest first."""
        if u < 0:
            raise ValueError("u must be >= 0")
        if u > self.window:
            raise WindowExceededError(f"u={u} exceeds window N={self.window}")
        if u > len(self.patches):
            raise RingGapError(f"only {len(self.patches)} patches held, {u} requested")
        chosen = list(self.patches)[len(self.patches) - u:]
        for a, b in zip(chosen, chosen[1:]):
            if b.step != a.step + 1:
                raise RingGapError(f"gap between steps {a.step} and {b.step}")
        for patch in reversed(chosen):
            params, opt = apply_patch(params, opt, patch)
        if pop:
            for _ in range(u):
                self.patches.pop()
        return params, opt

    def stored_bytes(self) -> int:
        return sum(p.stored_bytes for p in self.patches)

    def pre_compress_bytes(self) -> int:
        return sum(p.pre_compress_bytes for p in self.patches)

    def save(self, directory: str | Path) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = []
        for p in self.patches:
            path = d / f"patch-{p.step:06d}.bin"
            p.save(path)
            paths.append(path)
        return paths

    @classmethod
    def load(cls, directory: str | Path, window: int, revert_optimizer: bool = True) -> "RingBuffer":
        files = sorted(Path(directory).glob("patch-*.bin"))
        patches = [DeltaPatch.load(f) for f in files][-window:]
        mode = patches[0].mode if patches else XOR
        codec = patches[0].codec if patches else "identity"
        ring = cls(window, mode, revert_optimizer, codec)
        ring.patches.extend(patches)
        return ring


# --- budgets ---------------------------------------------------------------

@dataclass
class BudgetRow:
    artifact: str
    formula: str
    value: float
    unit: str

    def to_json(self) -> dict:
        return {"artifact": self.artifact, "formula": self.formula, "value": self.value, "unit": self.unit}


def budget_report(param_count: int, dtype_bytes: int = 2, N: int = 16, ratio: float = 0.70,
                  K: int = 1000, t_step: float = 1.0, per_step_bytes: int | None = None,
                  wal_records: int = 0, opt_bytes_per_param: int = 8) -> list[BudgetRow]:
    """Storage/latency rows; ``per_step_bytes`` overrides dtype_bytes·P for a measured delta size."""
    if min(param_count, dtype_bytes, N, K) <= 0 or ratio <= 0 or t_step <= 0:
        raise ValueError("budget inputs must be positive")
    P = param_count
    per_step = dtype_bytes * P if per_step_bytes is None else per_step_bytes
    pre = per_step * N
    return [
        BudgetRow("full checkpoint (w+opt)", f"({dtype_bytes}+{opt_bytes_per_param})P",
                  float((dtype_bytes + opt_bytes_per_param) * P), "B"),
        BudgetRow("  weights", f"{dtype_bytes}P", float(dtype_bytes * P), "B"),
        BudgetRow("  optimizer moments", f"{opt_bytes_per_param}P", float(opt_bytes_per_param * P), "B"),
        BudgetRow("micro-checkpoint (w only)", f"{dtype_bytes}P", float(dtype_bytes * P), "B"),
        BudgetRow("dense delta per-step", "pre-compress", float(per_step), "B"),
        BudgetRow("ring pre-compress total", "per_step*N", float(pre), "B"),
        BudgetRow("ring stored", "round(per_step*N*ratio)", float(round(pre * ratio)), "B"),
        BudgetRow("WAL", "32*records", float(32 * wal_records), "B"),
        BudgetRow("worst-case replay latency", "K*t_step", float(K * t_step), "s"),
    ]


def budget_value(rows: list[BudgetRow], artifact: str) -> float:
    for r in rows:
        if r.artifact.strip() == artifact:
            return r.value
    raise KeyError(artifact)
