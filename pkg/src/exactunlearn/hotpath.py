"""Audited approximate path: diagonal Fisher, preconditioned anti-update, short retain-tune."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import Corpus
from .dettrain.model import F32, ModelParams, example_forward_backward, microbatch_grad
from .dettrain.optim import OptState, TrainConfig, adamw_update
from .dettrain.trainer import add_into
from .rng import OP_RETAIN_TUNE, key_hash

LossFn = Callable[[Mapping[str, np.ndarray]], float]


class HotPathInfeasible(RuntimeError):
    """Backtracking could not find an acceptable anti-step."""


@dataclass
class FisherDiag:
    diag: dict[str, np.ndarray]
    damping: float
    sample_count: int

    @staticmethod
    def default_damping(diag: Mapping[str, np.ndarray]) -> float:
        total = sum(float(v.astype(np.float64).sum()) for v in diag.values())
        n = sum(v.size for v in diag.values())
        return 1e-3 * total / n + 1e-8


def estimate_fisher_diag(params: Mapping[str, np.ndarray], corpus: Corpus, sample: Sequence[int],
                         damping: float | None = None) -> FisherDiag:
    """Mean over examples of squared per-example gradients, accumulated in sample order."""
    if not sample:
        raise ValueError("retain sample must be nonempty")
    cfg = params.cfg
    acc = {k: np.zeros(v.shape, np.float64) for k, v in params.items()}
    for doc_id in sample:
        _, g = example_forward_backward(params, cfg, doc_id, corpus.tokens(doc_id))
        for k in acc:
            gk = g[k].astype(np.float64)
            acc[k] += gk * gk
    diag = {k: (v / len(sample)).astype(F32) for k, v in acc.items()}
    lam = FisherDiag.default_damping(diag) if damping is None else damping
    return FisherDiag(diag, lam, len(sample))


@dataclass
class HotPathConfig:
    eta: float = 1e-3
    max_steps: int = 3
    trust_radius: float = 5.0
    retain_steps: int = 10
    retain_lr: float = 1e-3
    utility_band: float = 1.0  # percent
    backtrack: float = 0.5
    eta_min: float = 1e-8
    retain_microbatch: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("eta", "trust_radius", "retain_lr", "utility_band", "eta_min"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_steps < 1 or self.retain_steps < 0:
            raise ValueError("max_steps >= 1 and retain_steps >= 0 required")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")


def precondition(g: Mapping[str, np.ndarray], fisher: FisherDiag, eta: float) -> dict[str, np.ndarray]:
    """δθ = η (Ĥ + λ)⁻¹ g, elementwise."""
    lam = F32(fisher.damping)
    return {k: (F32(eta) * g[k] / (fisher.diag[k] + lam)).astype(F32) for k in g}


def fisher_norm(delta: Mapping[str, np.ndarray], fisher: FisherDiag) -> float:
    total = 0.0
    for k, d in delta.items():
        d64 = d.astype(np.float64)
        total += float(np.sum(fisher.diag[k].astype(np.float64) * d64 * d64))
    return math.sqrt(total)


@dataclass
class StepReport:
    accepted_eta: float | None
    tries: int
    fisher_norm: float
    forget_loss: tuple[float, float] | None = None
    retain_loss: tuple[float, float] | None = None


def anti_update(params: Mapping[str, np.ndarray], g_forget: Mapping[str, np.ndarray], fisher: FisherDiag,
                cfg: HotPathConfig, eta: float | None = None, forget_loss: LossFn | None = None,
                retain_loss: LossFn | None = None):
    """One preconditioned ascent step on the forget loss with halving backtracking.

    Accepts the first η with ‖δθ‖_Ĥ ≤ τ, strictly increased forget loss and
    retain loss inside the utility band; loss gates are skipped when the
    corresponding callable is None. Raises HotPathInfeasible when η falls
    below the floor.
    """
    if fisher.damping <= 0:
        raise ValueError("damping must be positive")
    eta = cfg.eta if eta is None else eta
    f0 = forget_loss(params) if forget_loss else None
    r0 = retain_loss(params) if retain_loss else None
    tries = 0
    while eta >= cfg.eta_min:
        tries += 1
        delta = precondition(g_forget, fisher, eta)
        norm = fisher_norm(delta, fisher)
        if norm <= cfg.trust_radius:
            cand = {k: (params[k] + delta[k]).astype(F32) for k in params}
            if isinstance(params, ModelParams):
                cand = ModelParams(cand, params.cfg)
            f1 = forget_loss(cand) if forget_loss else None
            r1 = retain_loss(cand) if retain_loss else None
            ok_f = f0 is None or f1 > f0
            ok_r = r0 is None or r1 <= r0 * (1.0 + cfg.utility_band / 100.0)
            if ok_f and ok_r:
                assert fisher_norm(delta, fisher) <= cfg.trust_radius
                rep = StepReport(eta, tries, norm,
                                 None if f0 is None else (f0, f1), None if r0 is None else (r0, r1))
                return cand, rep
        eta *= cfg.backtrack
    raise HotPathInfeasible(f"no acceptable anti-step above eta_min={cfg.eta_min} after {tries} tries")


def retain_tune(params: ModelParams, corpus: Corpus, retain_ids: Sequence[int], steps: int, lr: float,
                train_cfg: TrainConfig, opt: OptState | None = None, microbatch: int = 8, seed: int = 0,
                trainable: Sequence[str] | None = None) -> tuple[ModelParams, OptState]:
    """``steps`` sum-reduction AdamW steps on retain minibatches drawn by counter RNG."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if opt is None:
        opt = OptState.zeros(params)
    if steps == 0:
        return params, opt
    ids = sorted(retain_ids)
    keys = list(params) if trainable is None else list(trainable)
    for s in range(steps):
        pos = [key_hash(seed, s, j, OP_RETAIN_TUNE) % len(ids) for j in range(microbatch)]
        mb = [ids[p] for p in pos]
        r = microbatch_grad(params, params.cfg, corpus, mb, key_hash(seed, s, 0, OP_RETAIN_TUNE, 1))
        g = add_into(None, r.grad)
        for k in params:
            if k not in keys:
                g[k] = np.zeros_like(g[k])
        new_p, new_o = adamw_update(params, opt, g, lr, train_cfg)
        for k in params:  # frozen tensors keep their exact bytes
            if k not in keys:
                new_p[k] = params[k]
                new_o.exp_avg[k], new_o.exp_avg_sq[k] = opt.exp_avg[k], opt.exp_avg_sq[k]
        params, opt = new_p, new_o
    return params, opt


@dataclass
class HotPathReport:
    feasible: bool
    servable: bool = False
    steps: list[dict] = field(default_factory=list)
    forget_loss: list[float] = field(default_factory=list)
    retain_loss: list[float] = field(default_factory=list)
    retain_tune_warning: str | None = None
    reason: str | None = None

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2)


def mean_token_loss(params, corpus: Corpus, ids: Sequence[int]) -> float:
    r = microbatch_grad(params, params.cfg, corpus, list(ids), need_grad=False)
    n = sum(len(corpus.tokens(i)) + 1 for i in ids)
    return r.loss / n


def hot_path_unlearn(params: ModelParams, corpus: Corpus, forget_ids: Sequence[int],
                     retain_sample: Sequence[int], cfg: HotPathConfig, train_cfg: TrainConfig
                     ) -> tuple[ModelParams, HotPathReport]:
    """Up to S anti-steps with backtracking, then a short retain-tune. Never marks itself servable."""
    forget_ids = [i for i in forget_ids if i in corpus]
    report = HotPathReport(feasible=True)
    f_loss = lambda p: mean_token_loss(p, corpus, forget_ids)  # noqa: E731
    r_loss = lambda p: mean_token_loss(p, corpus, retain_sample)  # noqa: E731
    fisher = estimate_fisher_diag(params, corpus, retain_sample)
    report.forget_loss.append(f_loss(params))
    report.retain_loss.append(r_loss(params))
    eta = cfg.eta
    for s in range(cfg.max_steps):
        g = microbatch_grad(params, params.cfg, corpus, forget_ids).grad
        try:
            params, rep = anti_update(params, g, fisher, cfg, eta, f_loss, r_loss)
        except HotPathInfeasible as e:
            if s == 0:
                report.feasible = False
                report.reason = str(e)
                return params, report
            break
        eta = rep.accepted_eta  # η only shrinks
        report.steps.append(asdict(rep))
        report.forget_loss.append(rep.forget_loss[1])
        report.retain_loss.append(rep.retain_loss[1])
    before = r_loss(params)
    params, _ = retain_tune(params, corpus, retain_sample, cfg.retain_steps, cfg.retain_lr, train_cfg,
                            microbatch=cfg.retain_microbatch, seed=cfg.seed)
    after = r_loss(params)
    if after > before:
        report.retain_tune_warning = f"retain loss rose during retain-tune: {before:.6f} -> {after:.6f}"
    report.retain_loss.append(after)
    report.forget_loss.append(f_loss(params))
    return params, report
