"""The eleven acceptance criteria, at their stated tolerances.

Each test carries ``@pytest.mark.criterion(n, title)``; conftest prints one
pass/fail line per criterion at the end of the session.
"""

import copy
import time

import numpy as np
import pytest

from exactunlearn.adapters import AdapterRegistry, train_cohort
from exactunlearn.audits import (audit_inputs_for, canary_exposure, extraction_items, run_audit_suite,
                                 targeted_extraction)
from exactunlearn.closure import SimHashIndex, expand_closure, hamming, jaccard
from exactunlearn.controller import (ADAPTER_DELETE, EXACT_REPLAY, HOT_PATH, NOOP, NORMAL, RECENT_REVERT, URGENT,
                                     Controller, ForgetRequest, ManifestLog, RoutingState, ci_gate,
                                     nondeterministic_fault, route, verify_chain)
from exactunlearn.corpus import Corpus, CorpusProfile, Document, generate_corpus
from exactunlearn.dettrain.checkpoint import model_hash, state_hash
from exactunlearn.dettrain.optim import TrainConfig
from exactunlearn.dettrain.trainer import train
from exactunlearn.replay import (mean_reduction_counterexample, oracle_retain_train, prove_equality,
                                 replay_filter)
from exactunlearn.ring import ARITH, budget_report, budget_value
from exactunlearn.wal import SEGMENT_HEADER, WalLog, WalWriter

from conftest import RUN_ID, record_run
from test_closure import planted_chain

KEY = b"acceptance-manifest-key"


def closure_of(corpus, request):
    ids = [i for i in corpus.ids() if corpus.docs[i].split != "control"]
    return expand_closure(request, SimHashIndex(corpus, ids)).expanded


@pytest.fixture(scope="module")
def run200(corpus, tmp_path_factory):
    """The full toy run: 200 steps, accumulation 2, checkpoints every 25, XOR ring of 16."""
    t0 = time.perf_counter()
    cfg = TrainConfig(total_steps=200, accum_len=2)
    run = record_run(corpus, cfg, tmp_path_factory.mktemp("run200"), ring_window=16, every=25,
                     keep_states=True)
    run.train_seconds = time.perf_counter() - t0
    return run


# 1 ------------------------------------------------------------------------------

@pytest.mark.criterion(1, "Bit-exact filtered replay vs oracle retrain (200 steps)")
def test_c1_g1_bit_exactness(run200, request_ids):
    closure = closure_of(run200.corpus, request_ids)
    assert len(run200.corpus.training_ids()) == 2009
    assert closure == set(run200.corpus.ids("forget")) and len(closure) == 45
    first = min(t for t, mbs in run200.wal.step_ids().items() if any(i in closure for mb in mbs for i in mb))
    ck = max(s for s in run200.result.checkpoints if s <= first)
    t0 = time.perf_counter()
    rep = replay_filter(run200.result.checkpoints[ck], run200.wal, run200.corpus, closure)
    orc = oracle_retain_train(run200.result.checkpoints[ck], run200.wal, run200.corpus, closure)
    proof = prove_equality(rep, orc, run200.wal.digest())
    elapsed = run200.train_seconds + time.perf_counter() - t0
    print(f"checkpoint {ck}, first influence {first}, closure {len(closure)}, {elapsed:.1f}s")
    assert proof.status == "PASS"
    assert proof.model_hash_oracle == proof.model_hash_replay
    assert proof.opt_hash_oracle == proof.opt_hash_replay
    assert all(proof.component_equality.values())
    assert elapsed < 120


# 2 ------------------------------------------------------------------------------

@pytest.mark.criterion(2, "CI gate: 100-step train-train and replay equality; fault fails stage 1")
def test_c2_ci_gate(corpus, tmp_path):
    clean = ci_gate(TrainConfig(), corpus, steps=100, workdir=tmp_path)
    assert clean.exit_code == 0 and all(s["ok"] for s in clean.stages) and len(clean.stages) == 3
    faulty = ci_gate(TrainConfig(), corpus, steps=100, fault=nondeterministic_fault)
    assert faulty.exit_code == 1 and faulty.stages[0]["stage"] == 1 and not faulty.stages[0]["ok"]


# 3 ------------------------------------------------------------------------------

@pytest.mark.criterion(3, "WAL footprint: 400 records = 12,800 payload bytes")
def test_c3_wal_footprint(tmp_path, run200):
    with WalWriter(tmp_path, RUN_ID) as w:
        for t in range(200):
            w.emit_record([2 * t + 1], t, 1e-3, t, False)
            w.emit_record([2 * t + 2], t, 1e-3, t, True)
    log = WalLog(tmp_path)
    assert log.payload_bytes() == 12_800
    assert log.total_bytes() - SEGMENT_HEADER.size * len(log.segment_paths()) == 12_800
    assert run200.wal.payload_bytes() == 12_800  # the 200-step run: 2 microbatches per step


# 4 ------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def arith_run(corpus, tmp_path_factory):
    cfg = TrainConfig(total_steps=40, warmup_steps=5)
    return record_run(corpus, cfg, tmp_path_factory.mktemp("arith"), ring_window=16, ring_mode=ARITH,
                      keep_states=True)


@pytest.mark.criterion(4, "Recent revert: XOR byte-exact, replay restores; ARITH within u ULPs")
def test_c4_g3_revert(run200, arith_run):
    final = (run200.result.params, run200.result.opt)
    meta = run200.result.checkpoints[0][2]
    for u in (1, 8, 16):
        p, o = run200.ring.revert(*final, u)
        assert state_hash(p, o) == state_hash(*run200.states[200 - u])
        rp, ro, _ = replay_filter((p, o, dict(meta, logical_step=200 - u)), run200.wal, run200.corpus)
        assert state_hash(rp, ro) == state_hash(*final)
    T = arith_run.cfg.total_steps
    worst = {}
    for u in (1, 8, 16):
        p, _ = arith_run.ring.revert(arith_run.result.params, arith_run.result.opt, u)
        hist, _ = arith_run.states[T - u]
        for k in p:
            ulps = np.abs(p[k].astype(np.float64) - hist[k]) / np.spacing(np.abs(hist[k]))
            worst[(u, k)] = float(ulps.max())
            assert worst[(u, k)] <= u, (u, k, worst[(u, k)])
    print("ARITH worst ULPs:", {f"u={u}": max(v for (uu, _), v in worst.items() if uu == u) for u in (1, 8, 16)})


# 5 ------------------------------------------------------------------------------

@pytest.mark.criterion(5, "Budget rows: 13.0 GB checkpoint, 4,552,307 B ring")
def test_c5_budget():
    full = budget_value(budget_report(int(1.3e9), 2), "full checkpoint (w+opt)")
    assert abs(full - 13.0e9) / 13.0e9 <= 0.01
    stored = budget_value(budget_report(1, per_step_bytes=406_456, N=16, ratio=0.70), "ring stored")
    assert abs(stored - 4_552_307) <= 1


# 6 ------------------------------------------------------------------------------

@pytest.mark.criterion(6, "Adapter deletion restores served weights byte-for-byte")
def test_c6_g2_adapter_deletion(run200, corpus):
    base = run200.result.params
    before = model_hash(base)
    reg = AdapterRegistry(base)
    cfg = TrainConfig(total_steps=30, warmup_steps=0, base_lr=1e-2, weight_decay=0.0)
    train_cohort(base, corpus, 1, cfg, reg, steps=30)
    pre_cohort = reg.serving()
    train_cohort(base, corpus, 2, cfg, reg, steps=30)
    assert model_hash(base) == before
    assert model_hash(reg.serving()) != model_hash(pre_cohort)
    reg.delete(2)
    assert model_hash(reg.serving()) == model_hash(pre_cohort)
    reg.delete(1)
    assert model_hash(reg.serving()) == before


# 7 ------------------------------------------------------------------------------

@pytest.mark.criterion(7, "Sum necessity: mean reduction diverges, sum does not")
def test_c7_sum_necessity(corpus, tmp_path):
    diffs = {}
    for reduction in ("mean", "sum"):
        cfg = TrainConfig(total_steps=4, warmup_steps=0, reduction=reduction)
        run = record_run(corpus, cfg, tmp_path / reduction)
        drop = run.wal.step_ids()[0][0][2]  # one sample: the microbatch shrinks from 8 to 7
        out = mean_reduction_counterexample(run.result.checkpoints[0], run.wal, corpus, {drop},
                                            reduction=reduction)
        diffs[reduction] = out["max_abs_diff"]
    print(diffs)
    assert diffs["mean"] > 0 and diffs["sum"] == 0


# 8 ------------------------------------------------------------------------------

@pytest.mark.criterion(8, "Empty-step skip: step counters match oracle; no skip breaks equality")
def test_c8_empty_step_skip(small_corpus, tmp_path):
    run = record_run(small_corpus, TrainConfig(total_steps=6, warmup_steps=1), tmp_path)
    closure = {i for mb in run.wal.step_ids()[2] for i in mb}
    ck = run.result.checkpoints[0]
    rp, ro, rrep = replay_filter(ck, run.wal, small_corpus, closure)
    op, oo, orep = oracle_retain_train(ck, run.wal, small_corpus, closure)
    assert rrep.empty_logical_steps >= 1 and ro.step == oo.step
    assert prove_equality((rp, ro, rrep), (op, oo, orep), run.wal.digest()).passed
    np_, no, _ = replay_filter(ck, run.wal, small_corpus, closure, skip_empty=False)
    assert state_hash(np_, no) != state_hash(op, oo)


# 9 ------------------------------------------------------------------------------

@pytest.mark.criterion(9, "Audit parity replay vs oracle; overfit positive controls")
def test_c9_audit_parity(run200, request_ids):
    closure = closure_of(run200.corpus, request_ids)
    ck = run200.result.checkpoints[0]
    rp, _, _ = replay_filter(ck, run200.wal, run200.corpus, closure)
    op, _, _ = oracle_retain_train(ck, run200.wal, run200.corpus, closure)
    inputs = audit_inputs_for(run200.corpus, closure, request_ids)
    a, b = run_audit_suite(rp, inputs), run_audit_suite(op, inputs)
    auc_gap = abs(a.tests["mia_auc"].metric - b.tests["mia_auc"].metric)
    ppl_a, ppl_b = a.tests["retain_ppl"].metric, b.tests["retain_ppl"].metric
    print(f"AUC {a.tests['mia_auc'].metric:.4f}/{b.tests['mia_auc'].metric:.4f}  PPL {ppl_a:.4f}/{ppl_b:.4f}  "
          f"extraction {a.tests['targeted_extraction'].metric}/{b.tests['targeted_extraction'].metric}")
    assert auc_gap <= 0.05
    assert abs(ppl_a - ppl_b) / ppl_b <= 1e-3
    assert a.tests["targeted_extraction"].metric == b.tests["targeted_extraction"].metric == 0.0

    text, k = "user ann secret code 1011001110.", 10
    c = Corpus({1: Document(1, text, "base", secret_start=21)})
    cfg = TrainConfig(total_steps=150, warmup_steps=5, accum_len=1, microbatch_size=1, base_lr=1e-2)
    fit = train(c, cfg).params
    exposure = canary_exposure(fit, text[:21], text[21:31])
    print(f"positive control: exposure {exposure:.2f} of k={k}")
    assert targeted_extraction(fit, extraction_items(c, [1])) == 1.0
    assert abs(exposure - k) <= 1


# 10 -----------------------------------------------------------------------------

@pytest.mark.criterion(10, "Closure: planted chain; 10k-doc all-pairs oracle finds no missed pair")
def test_c10_closure(tmp_path):
    a, b, c = planted_chain()
    chain = Corpus({i + 1: Document(i + 1, t.decode(), "base") for i, t in enumerate((a, b, c))})
    assert expand_closure([1], SimHashIndex(chain)).expanded == {1, 2, 3}

    corpus, request = generate_corpus(CorpusProfile(size=10_000, forget=200, seed=10))
    ids = [i for i in corpus.ids() if corpus.docs[i].split != "control"]
    assert len(ids) >= 10_000
    idx = SimHashIndex(corpus, ids)
    hs = np.array([idx.hashes[i] for i in ids], dtype=np.uint64)
    pos = {i: n for n, i in enumerate(ids)}
    admitted = 0
    for n, x in enumerate(ids):
        near = np.nonzero(np.bitwise_count(hs[n + 1:] ^ hs[n]) <= 3)[0] + n + 1
        for m in near:
            y = ids[m]
            if jaccard(idx.shingles[x], idx.shingles[y]) >= 0.8:
                admitted += 1
                assert y in idx.candidates(x, 3) and x in idx.candidates(y, 3), (x, y)
                assert hamming(idx.hashes[x], idx.hashes[y]) == int(np.bitwise_count(hs[pos[x]] ^ hs[pos[y]]))
    print(f"{len(ids)} docs, {admitted} admitted pairs, all found by the index")
    assert admitted > 0


# 11 -----------------------------------------------------------------------------

def _matrix_expected(confined, window, urgency):
    if confined == "cohort":
        return ADAPTER_DELETE
    if confined == "none":
        return NOOP
    if window == "inside":
        return RECENT_REVERT
    if window == "spans":
        return EXACT_REPLAY
    return HOT_PATH if urgency == URGENT else EXACT_REPLAY


def _docs_confined_to(ctl, run, steps):
    ids = run.wal.step_ids()
    elsewhere = {i for t, mbs in ids.items() if t not in steps for mb in mbs for i in mb}
    for i in sorted({i for t in steps for mb in ids[t] for i in mb} - elsewhere):
        if ctl.routing_state(ctl.closure_of([i]).expanded).offending <= set(steps):
            return [i]
    raise AssertionError("no confined document")


@pytest.mark.criterion(11, "Controller routing matrix, linked escalation, tamper-evident chain")
def test_c11_controller(run200, tmp_path):
    T, N = 200, 16
    windows = {"inside": [190, 195], "spans": [150, 195], "outside": [40, 60]}
    for confined in ("cohort", "wal", "none"):
        for window, offending in windows.items():
            for urgency in (NORMAL, URGENT):
                cohort_of = {1: 3} if confined == "cohort" else {}
                off = [] if confined == "none" else offending
                st = RoutingState(T, N, [0, 25, 50, 75, 100, 125, 150, 175, 200], cohort_of, frozenset(off),
                                  frozenset({3}))
                got = route(ForgetRequest(1, frozenset({1}), urgency), {1}, st).path
                assert got == _matrix_expected(confined, window, urgency), (confined, window, urgency, got)

    ctl = Controller(run200.corpus, run200.wal, dict(run200.result.checkpoints), run200.result.params,
                     run200.result.opt, T, ManifestLog(KEY, tmp_path / "manifest.log"),
                     ring=copy.deepcopy(run200.ring))
    ids = _docs_confined_to(ctl, run200, [30])
    ctl.submit(ForgetRequest(5, frozenset(ids), URGENT), force_audit_fail=["mia_auc"])
    hot, replay = ctl.manifest.entries
    assert hot["path_taken"] == HOT_PATH and hot["outcome"] == "AUDIT_FAIL_ESCALATED"
    assert replay["path_taken"] == EXACT_REPLAY and replay["escalated_from"] == hot["seq"]
    assert replay["prev_entry_hash"] != hot["prev_entry_hash"]

    data = (tmp_path / "manifest.log").read_bytes()
    assert verify_chain(data, KEY) == (True, None)
    missed = [n for n in range(len(data))
              for flip in (0x01, 0x80) if verify_chain(data[:n] + bytes([data[n] ^ flip]) + data[n + 1:], KEY)[0]]
    print(f"{2 * len(data)} single-byte tampers, {len(missed)} undetected")
    assert not missed
