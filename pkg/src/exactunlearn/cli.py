"""Operator CLI: every subcommand reads and writes one run workspace directory.

Exit codes: 0 success/PASS, 1 audit or equality failure, 2 integrity failure,
3 precondition or pin-drift refusal.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_AUDIT, EXIT_INTEGRITY, EXIT_REFUSED = 0, 1, 2, 3
KEY_ENV = "EXACTUNLEARN_KEY"
TOY_KEY = b"exactunlearn-toy-deployment-key"
TOY_KEY_WARNING = ("no deployment key supplied; using the built-in toy key. Manifest tags and WAL "
                   f"hashes are NOT secret. Set --key-file or ${KEY_ENV} in production.")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


class Workspace:
    """corpus/ wal/ checkpoints/ ring/ adapters/ reports/ state/ manifest.log + workspace.json."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def sub(self, name: str) -> Path:
        p = self.root / name
        p.mkdir(parents=True, exist_ok=True)
        return p

    @property
    def meta_path(self) -> Path:
        return self.root / "workspace.json"

    def load(self) -> dict:
        if not self.meta_path.exists():
            raise FileNotFoundError(f"{self.root} is not a workspace (run gen-corpus first)")
        return json.loads(self.meta_path.read_text())

    def save(self, meta: dict) -> None:
        from .sealed import atomic_write
        self.root.mkdir(parents=True, exist_ok=True)
        atomic_write(self.meta_path, _dump(meta).encode())

    def write_addressed(self, sub: str, stem: str, data: bytes, ext: str) -> Path:
        from .sealed import atomic_write
        h = hashlib.sha256(data).hexdigest()[:12]
        path = self.sub(sub) / f"{stem}-{h}.{ext}"
        atomic_write(path, data)
        return path

    def corpus(self):
        from .corpus import Corpus
        return Corpus.load(self.root / self.load()["corpus"])


def _key(args) -> tuple[bytes, bool]:
    if getattr(args, "key_file", None):
        return Path(args.key_file).read_bytes().strip(), True
    if os.environ.get(KEY_ENV):
        return os.environ[KEY_ENV].encode(), True
    return TOY_KEY, False


def _wal_key(args, meta: dict) -> bytes | None:
    if not meta.get("wal_keyed"):
        return None
    return _key(args)[0]


def _save_state(ws: Workspace, stem: str, params, opt, meta: dict) -> Path:
    from .dettrain.checkpoint import checkpoint_bytes
    return ws.write_addressed("checkpoints" if stem.startswith("reverted") else "state", stem,
                              checkpoint_bytes(params, opt, meta), "bin")


# --- subcommands -------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    from .corpus import CorpusProfile, generate_corpus
    prof = CorpusProfile(size=args.size, forget=args.forget, dup_rate=args.dup_rate,
                         canaries_k=args.canaries_k, seed=args.seed)
    corpus, request = generate_corpus(prof)
    ws = Workspace(args.workspace)
    tmp = ws.sub("corpus") / ".corpus.tmp"
    corpus.save(tmp)
    data = tmp.read_bytes()
    tmp.unlink()
    cpath = ws.write_addressed("corpus", "corpus", data, "jsonl")
    rid = int(hashlib.sha256(json.dumps(request).encode()).hexdigest()[:32], 16)
    req = {"request_id": str(rid), "sample_ids": request, "urgency": "NORMAL"}
    rpath = ws.write_addressed("corpus", "request", _dump(req).encode(), "json")
    meta = {"version": __version__, "corpus": str(cpath.relative_to(ws.root)),
            "request": str(rpath.relative_to(ws.root)), "profile": vars(prof)}
    ws.save(meta)
    n_train = len(corpus.training_ids())
    print(_dump({"corpus": str(cpath), "request": str(rpath), "training_samples": n_train,
                 "forget": len(corpus.ids("forget")), "retain": n_train - len(corpus.ids("forget")),
                 "digest": corpus.digest()}))
    return EXIT_OK


def cmd_train(args) -> int:
    import shutil
    from .adapters import AdapterRegistry, train_cohort
    from .dettrain.model import ModelConfig
    from .dettrain.optim import TrainConfig
    from .dettrain.trainer import CheckpointPolicy, run_meta, train
    from .ring import RingBuffer
    from .wal import TOY_HASH_WARNING, WalLog, WalWriter

    ws = Workspace(args.workspace)
    meta = ws.load()
    corpus = ws.corpus()
    cfg = TrainConfig(base_lr=args.lr, warmup_steps=min(args.warmup, args.steps), total_steps=args.steps,
                      accum_len=args.accum, microbatch_size=args.microbatch, master_seed=args.seed,
                      reduction=args.reduction, model=ModelConfig())
    key, keyed = _key(args)
    if not keyed:
        _err("warning: " + TOY_HASH_WARNING)
    for d in ("wal", "checkpoints", "ring", "adapters", "state", "reports"):
        shutil.rmtree(ws.root / d, ignore_errors=True)
    (ws.root / "manifest.log").unlink(missing_ok=True)
    rm = run_meta(cfg, corpus)
    run_id = bytes.fromhex(hashlib.sha256((rm["config_digest"] + rm["corpus_digest"]).encode()).hexdigest()[:32])
    ring = RingBuffer(args.ring_window, mode=args.ring_mode, codec=args.codec) if args.ring_window else None
    ck_tmp = ws.sub("checkpoints") / ".staging"
    ck_tmp.mkdir(exist_ok=True)
    policy = CheckpointPolicy(every=args.checkpoint_every, at_steps=(0,), directory=ck_tmp)
    _err(f"training {cfg.total_steps} steps x {cfg.accum_len} microbatches of {cfg.microbatch_size}")
    with WalWriter(ws.sub("wal"), run_id, key=key if keyed else None, run_meta=rm) as w:
        res = train(corpus, cfg, wal=w, ckpt_policy=policy, ring=ring)
    ckpts = {}
    for step, path in sorted(res.checkpoints.items()):
        data = Path(path).read_bytes()
        ckpts[str(step)] = str(ws.write_addressed("checkpoints", f"ckpt-{step:06d}", data, "bin").relative_to(ws.root))
    shutil.rmtree(ck_tmp)
    if ring is not None:
        ring.save(ws.sub("ring"))
    from .dettrain.checkpoint import checkpoint_load
    final = checkpoint_load(ws.root / ckpts[str(cfg.total_steps)])
    cohorts = []
    if args.cohort_steps > 0:
        acfg = TrainConfig(total_steps=args.cohort_steps, base_lr=args.cohort_lr, weight_decay=0.0,
                           warmup_steps=0, master_seed=args.seed)
        reg = AdapterRegistry(final[0], ws.sub("adapters"))
        for j in sorted({corpus.docs[i].cohort for i in corpus.ids("cohort")}):
            train_cohort(final[0], corpus, j, acfg, reg, steps=args.cohort_steps)
            cohorts.append(j)
        served = reg.serving()
    else:
        served = final[0]
    # the model served before any forget request: the utility reference for audits
    ref_path = _save_state(ws, "served-original", served, final[1], dict(final[2]))
    wal = WalLog(ws.root / "wal", key if keyed else None)
    info = dict(rm, wal_sha256=wal.digest(), wal_records=sum(1 for _ in wal.records()),
                wal_payload_bytes=wal.payload_bytes(), wal_keyed=keyed,
                final_state_hash=hashlib.sha256(final[0].to_bytes() + final[1].to_bytes()).hexdigest(),
                checkpoints=ckpts, ring_window=args.ring_window, cohorts=cohorts)
    rpath = ws.write_addressed("reports", "run", _dump(info).encode(), "json")
    meta.update(run=str(rpath.relative_to(ws.root)), checkpoints=ckpts, T=cfg.total_steps,
                current=ckpts[str(cfg.total_steps)], forgotten=[], wal_keyed=keyed,
                ring_window=args.ring_window, cohort_steps=args.cohort_steps, cohort_lr=args.cohort_lr,
                reference=str(ref_path.relative_to(ws.root)))
    ws.save(meta)
    print(_dump({"run_report": str(rpath), "final_state_hash": info["final_state_hash"],
                 "wal_records": info["wal_records"], "wal_payload_bytes": info["wal_payload_bytes"],
                 "checkpoints": sorted(int(s) for s in ckpts), "cohort_adapters": cohorts}))
    return EXIT_OK


def _load_request(ws: Workspace, args) -> dict:
    path = getattr(args, "request", None)
    if path:
        return json.loads(Path(path).read_text())
    if getattr(args, "empty", False):
        return {"request_id": "0", "sample_ids": []}
    return json.loads((ws.root / ws.load()["request"]).read_text())


def cmd_replay(args) -> int:
    from .closure import SimHashIndex, expand_closure
    from .controller import offending_steps
    from .dettrain.checkpoint import checkpoint_load
    from .replay import PinDriftError, ReplayAssertionError, oracle_retain_train, prove_equality, replay_filter
    from .wal import WalError, WalLog

    ws = Workspace(args.workspace)
    meta = ws.load()
    corpus = ws.corpus()
    wal = WalLog(ws.root / "wal", _wal_key(args, meta))
    req = _load_request(ws, args)
    ids = [i for i in req["sample_ids"] if i in corpus]
    if ids:
        idx = SimHashIndex(corpus, [i for i in corpus.ids() if corpus.docs[i].split != "control"])
        closure = expand_closure(ids, idx).expanded
    else:
        closure = set()
    steps = sorted(int(s) for s in meta["checkpoints"])
    if args.from_step is not None:
        start_step = args.from_step
    else:
        off = offending_steps(wal, closure) if closure else set()
        # an empty closure replays the whole run as a determinism check
        start_step = max(s for s in steps if s <= min(off)) if off else steps[0]
    if str(start_step) not in meta["checkpoints"]:
        _err(f"no checkpoint at step {start_step}")
        return EXIT_REFUSED
    ckpt = checkpoint_load(ws.root / meta["checkpoints"][str(start_step)])
    try:
        rep = replay_filter(ckpt, wal, corpus, closure)
        if closure:
            other = oracle_retain_train(ckpt, wal, corpus, closure)
        else:  # no filtering: the reference is the direct run itself
            fin = checkpoint_load(ws.root / meta["checkpoints"][str(meta["T"])])
            other = (fin[0], fin[1], rep[2])
    except WalError as e:
        _err(f"integrity failure: {e}")
        return EXIT_INTEGRITY
    except (PinDriftError, ReplayAssertionError) as e:
        _err(f"refused: {e}")
        return EXIT_REFUSED
    proof = prove_equality(rep, other, wal.digest())
    path = ws.write_addressed("reports", "equality_proof", proof.dumps().encode(), "json")
    print(_dump({"status": proof.status, "proof": str(path), "from_step": start_step,
                 "closure_size": len(closure), "applied_steps": rep[2].applied_steps,
                 "empty_logical_steps": rep[2].empty_logical_steps}))
    return EXIT_OK if proof.passed else EXIT_AUDIT


def cmd_revert(args) -> int:
    from .dettrain.checkpoint import checkpoint_load, state_hash
    from .ring import RingBuffer, RingError

    ws = Workspace(args.workspace)
    meta = ws.load()
    if not meta.get("ring_window"):
        _err("no ring buffer recorded for this run")
        return EXIT_REFUSED
    ring = RingBuffer.load(ws.root / "ring", meta["ring_window"])
    params, opt, m = checkpoint_load(ws.root / meta["current"])
    try:
        p, o = ring.revert(params, opt, args.steps)
    except RingError as e:
        _err(f"refused: {e}")
        return EXIT_REFUSED
    out_meta = dict(m, logical_step=m.get("logical_step", meta["T"]) - args.steps)
    path = _save_state(ws, f"reverted-{out_meta['logical_step']:06d}", p, o, out_meta)
    result = {"reverted_steps": args.steps, "state_hash": state_hash(p, o), "file": str(path)}
    hist = meta["checkpoints"].get(str(out_meta["logical_step"]))
    if hist is not None:
        hp, ho, _ = checkpoint_load(ws.root / hist)
        result["matches_checkpoint"] = state_hash(hp, ho) == result["state_hash"]
    print(_dump(result))
    return EXIT_OK if result.get("matches_checkpoint", True) else EXIT_AUDIT


def _controller(ws: Workspace, args):
    from .adapters import AdapterRegistry
    from .audits import AuditThresholds
    from .controller import Controller, ManifestLog
    from .dettrain.checkpoint import checkpoint_load
    from .ring import RingBuffer
    from .wal import WalLog

    meta = ws.load()
    corpus = ws.corpus()
    key, keyed = _key(args)
    if not keyed:
        _err("warning: " + TOY_KEY_WARNING)
    wal = WalLog(ws.root / "wal", key if meta.get("wal_keyed") else None)
    params, opt, _ = checkpoint_load(ws.root / meta["current"])
    final, _, _ = checkpoint_load(ws.root / meta["checkpoints"][str(meta["T"])])
    ring = RingBuffer.load(ws.root / "ring", meta["ring_window"]) if meta.get("ring_window") else None
    registry = AdapterRegistry(final, ws.root / "adapters") if meta.get("cohort_steps") else None
    ckpts = {int(s): ws.root / p for s, p in meta["checkpoints"].items()}
    th = AuditThresholds(mia_band=tuple(args.mia_band), exposure_max=args.exposure_max,
                         extraction_max=args.extraction_max, utility_band=args.utility_band)
    from .dettrain.optim import TrainConfig
    ccfg = TrainConfig(total_steps=meta.get("cohort_steps", 30) or 1, base_lr=meta.get("cohort_lr", 3e-3),
                       weight_decay=0.0, warmup_steps=0, master_seed=TrainConfig.from_json(wal.run_meta["config"]).master_seed)
    ctl = Controller(corpus, wal, ckpts, params, opt, meta["T"], ManifestLog(key, ws.root / "manifest.log"),
                     ring=ring, registry=registry, thresholds=th, cohort_cfg=ccfg,
                     cohort_steps=meta.get("cohort_steps", 30), reports_dir=ws.sub("reports"),
                     forgotten=set(meta.get("forgotten", [])))
    return ctl, meta


def cmd_forget(args) -> int:
    from .controller import ForgetRequest, URGENT
    from .wal import WalError

    ws = Workspace(args.workspace)
    try:
        ctl, meta = _controller(ws, args)
    except WalError as e:
        _err(f"integrity failure: {e}")
        return EXIT_INTEGRITY
    req = ForgetRequest.from_json(_load_request(ws, args))
    if args.urgent:
        req = ForgetRequest(req.request_id, req.sample_ids, URGENT, req.submitted_at)
    n_before = len(ctl.manifest.entries)
    try:
        entry = ctl.submit(req, force_audit_fail=args.force_audit_fail or ())
    except WalError as e:
        _err(f"integrity failure: {e}")
        return EXIT_INTEGRITY
    if len(ctl.manifest.entries) > n_before:
        cur = _save_state(ws, "current", ctl.params, ctl.opt,
                          dict(ctl.wal.run_meta, logical_step=meta["T"], forgotten=len(ctl.forgotten)))
        meta.update(current=str(cur.relative_to(ws.root)), forgotten=sorted(ctl.forgotten))
        if ctl.ring is not None:  # resync the on-disk ring with what the controller kept
            for f in (ws.root / "ring").glob("patch-*.bin"):
                f.unlink()
            ctl.ring.save(ws.root / "ring")
        ws.save(meta)
    new = ctl.manifest.entries[n_before:] or [entry]
    print(_dump([{"seq": e["seq"], "path_taken": e["path_taken"], "outcome": e["outcome"],
                  "servable": e["servable"], "escalated_from": e["escalated_from"]} for e in new]))
    if entry["outcome"] == "FAIL_CLOSED":
        return EXIT_REFUSED
    return EXIT_OK if entry["servable"] else EXIT_AUDIT


def cmd_audit(args) -> int:
    from .audits import audit_inputs_for, run_audit_suite

    ws = Workspace(args.workspace)
    ctl, meta = _controller(ws, args)
    req = _load_request(ws, args)
    closure = ctl.closure_of([i for i in req["sample_ids"] if i in ctl.corpus])
    ref = None
    if args.reference == "original":
        from .audits import retain_ppl
        from .dettrain.checkpoint import checkpoint_load
        orig = checkpoint_load(ws.root / meta["reference"])[0]
        eval_ids = audit_inputs_for(ctl.corpus, closure.expanded, closure.requested).retain_eval_ids
        ref = retain_ppl(orig, ctl.corpus, eval_ids)
    inp = audit_inputs_for(ctl.corpus, closure.expanded, closure.requested, ref)
    rep = run_audit_suite(ctl.served(), inp, ctl.thresholds)
    path = ws.write_addressed("reports", "audit_report", rep.dumps().encode(), "json")
    for name, t in rep.tests.items():
        metric = "n/a" if t.metric is None else f"{t.metric:.6g}"
        print(f"{name:20s} {metric:>12s}  {'pass' if t.passed else 'FAIL'}")
    print(f"overall {'PASS' if rep.passed else 'FAIL'}  report={path}")
    return EXIT_OK if rep.passed else EXIT_AUDIT


def cmd_ci_gate(args) -> int:
    from .controller import ci_gate, nondeterministic_fault
    from .corpus import CorpusProfile, generate_corpus
    from .dettrain.optim import TrainConfig

    if args.workspace and (Path(args.workspace) / "workspace.json").exists():
        corpus = Workspace(args.workspace).corpus()
    else:
        corpus, _ = generate_corpus(CorpusProfile(seed=args.seed))
    cfg = TrainConfig(master_seed=args.seed)

    def truncate(wdir: Path) -> None:
        seg = sorted(wdir.glob("seg-*.wal"))[-1]
        data = seg.read_bytes()
        seg.write_bytes(data[:-32])

    res = ci_gate(cfg, corpus, steps=args.steps, fault=nondeterministic_fault if args.inject_fault else None,
                  tamper_wal=truncate if args.truncate_wal else None)
    for s in res.stages:
        print(f"stage {s['stage']} {s['name']}: {'ok' if s['ok'] else 'FAIL'}")
    print(f"ci-gate exit {res.exit_code}")
    return res.exit_code


def cmd_verify_wal(args) -> int:
    from .wal import WalError, WalLog
    ws = Workspace(args.workspace)
    meta = ws.load()
    try:
        rep = WalLog(ws.root / "wal", _wal_key(args, meta)).verify()
    except (WalError, OSError, ValueError) as e:
        _err(f"integrity failure: {e}")
        return EXIT_INTEGRITY
    print(_dump(rep.to_json()))
    return EXIT_OK if rep.ok else EXIT_INTEGRITY


def _human(v: float, unit: str) -> str:
    if unit != "B":
        return f"{v:g} {unit}"
    for name, scale in (("GB", 1e9), ("MB", 1e6), ("KB", 1e3)):
        if v >= scale:
            return f"≈ {v / scale:.1f} {name}"
    return f"{int(v):,} B"


def cmd_budget(args) -> int:
    from .ring import budget_report
    rows = budget_report(int(float(args.params)), args.dtype_bytes, args.window, args.ratio, args.K,
                         args.t_step, int(args.per_step_bytes) if args.per_step_bytes else None,
                         args.wal_records)
    for r in rows:
        exact = f"{int(r.value):,}" if r.unit == "B" else f"{r.value:g}"
        print(f"{r.artifact:28s} {r.formula:24s} {exact:>18s} {r.unit}  {_human(r.value, r.unit)}")
    if args.json:
        Path(args.json).write_text(_dump([r.to_json() for r in rows]))
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exactunlearn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def ws(sp, required=True):
        sp.add_argument("--workspace", "-w", required=required, help="run workspace directory")
        sp.add_argument("--key-file", help="deployment key for HMAC (else $%s or toy key)" % KEY_ENV)

    def thresholds(sp):
        sp.add_argument("--mia-band", type=float, nargs=2, default=(0.45, 0.55))
        sp.add_argument("--exposure-max", type=float, default=2.0)
        sp.add_argument("--extraction-max", type=float, default=0.0)
        sp.add_argument("--utility-band", type=float, default=1.0, help="percent")

    g = sub.add_parser("gen-corpus", help="generate the synthetic corpus and forget request")
    ws(g)
    g.add_argument("--size", type=int, default=2009)
    g.add_argument("--forget", type=int, default=45)
    g.add_argument("--dup-rate", type=float, default=0.02)
    g.add_argument("--canaries-k", type=int, default=10)
    g.add_argument("--seed", type=int, default=2009)
    g.set_defaults(fn=cmd_gen_corpus)

    t = sub.add_parser("train", help="deterministic training with WAL, checkpoints, ring and adapters")
    ws(t)
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--accum", type=int, default=2)
    t.add_argument("--microbatch", type=int, default=8)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--warmup", type=int, default=10)
    t.add_argument("--seed", type=int, default=1234)
    t.add_argument("--reduction", choices=("sum", "mean"), default="sum")
    t.add_argument("--checkpoint-every", type=int, default=50)
    t.add_argument("--ring-window", type=int, default=16)
    t.add_argument("--ring-mode", choices=("xor", "arith"), default="xor")
    t.add_argument("--codec", choices=("identity", "zlib"), default="identity")
    t.add_argument("--cohort-steps", type=int, default=30)
    t.add_argument("--cohort-lr", type=float, default=3e-3)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("replay", help="filtered replay plus equality proof")
    ws(r)
    r.add_argument("--request", help="request JSON (default: the generated forget request)")
    r.add_argument("--empty", action="store_true", help="replay with an empty closure")
    r.add_argument("--from-step", type=int)
    r.set_defaults(fn=cmd_replay)

    v = sub.add_parser("revert", help="XOR/ARITH revert of the newest steps from the ring")
    ws(v)
    v.add_argument("--steps", "-u", type=int, required=True)
    v.set_defaults(fn=cmd_revert)

    f = sub.add_parser("forget", help="route and execute a forget request through the controller")
    ws(f)
    f.add_argument("--request", help="request JSON (default: the generated forget request)")
    f.add_argument("--urgent", action="store_true")
    f.add_argument("--force-audit-fail", action="append", help="fault injection: test name to fail")
    thresholds(f)
    f.set_defaults(fn=cmd_forget)

    a = sub.add_parser("audit", help="run the audit suite on the served model")
    ws(a)
    a.add_argument("--request", help="request JSON naming the forget set")
    a.add_argument("--reference", choices=("none", "original"), default="original",
                   help="utility reference: the model served right after training, or none")
    thresholds(a)
    a.set_defaults(fn=cmd_audit)

    c = sub.add_parser("ci-gate", help="determinism gate: train twice, replay, WAL scan")
    ws(c, required=False)
    c.add_argument("--steps", type=int, default=100)
    c.add_argument("--seed", type=int, default=1234)
    c.add_argument("--inject-fault", action="store_true", help="nondeterministic-op stub in run 2")
    c.add_argument("--truncate-wal", action="store_true", help="drop the last WAL record before stage 3")
    c.set_defaults(fn=cmd_ci_gate)

    w = sub.add_parser("verify-wal", help="CRC/digest/monotonicity scan of the WAL")
    ws(w)
    w.set_defaults(fn=cmd_verify_wal)

    b = sub.add_parser("budget", help="storage/latency budget table")
    b.add_argument("--params", default="1.3e9")
    b.add_argument("--dtype-bytes", type=int, default=2)
    b.add_argument("--window", type=int, default=16)
    b.add_argument("--ratio", type=float, default=0.70)
    b.add_argument("--per-step-bytes", default=None)
    b.add_argument("--K", type=int, default=1000)
    b.add_argument("--t-step", type=float, default=1.0)
    b.add_argument("--wal-records", type=int, default=0)
    b.add_argument("--json", help="also write the rows as JSON")
    b.set_defaults(fn=cmd_budget)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        _err(str(e))
        return EXIT_REFUSED


if __name__ == "__main__":
    sys.exit(main())
