import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exactunlearn.dettrain.checkpoint import state_hash
from exactunlearn.dettrain.model import ModelConfig, init_params
from exactunlearn.dettrain.optim import OptState, TrainConfig
from exactunlearn.replay import replay_filter
from exactunlearn.ring import (ARITH, XOR, DeltaPatch, PatchMismatchError, RingBuffer, RingGapError,
                               WindowExceededError, apply_patch, budget_report, budget_value, capture_delta)

from conftest import record_run


def final(run):
    return run.result.params, run.result.opt


def test_noop_step_patch_is_zero_and_compresses(run40):
    p, o = run40.states[5]
    patch = capture_delta((p, o), (p, o), 5, XOR, "zlib")
    assert all(not t.any() for t in patch.tensors().values())
    assert patch.stored_bytes < patch.pre_compress_bytes / 100


def test_weights_only_patch_size(run40):
    (p0, _), (p1, _) = run40.states[3], run40.states[4]
    patch = capture_delta((p0, None), (p1, None), 3)
    assert patch.pre_compress_bytes == patch.model_bytes == 4 * p0.num_params()
    assert patch.stored_bytes == patch.pre_compress_bytes and not patch.has_opt


def test_window_discipline(run40):
    assert len(run40.ring) == 16 and run40.ring.steps() == list(range(24, 40))
    with pytest.raises(WindowExceededError):
        run40.ring.revert(*final(run40), 17)


def test_revert_zero_is_identity(run40):
    p, o = run40.ring.revert(*final(run40), 0)
    assert state_hash(p, o) == state_hash(*final(run40))


@pytest.mark.parametrize("u", [1, 8, 16])
def test_xor_revert_is_bit_exact(run40, u):
    p, o = run40.ring.revert(*final(run40), u)
    assert state_hash(p, o) == state_hash(*run40.states[40 - u])
    assert o.step == 40 - u


def test_revert_one_by_one_equals_batch(run40):
    ring = run40.ring
    p, o = final(run40)
    for patch in reversed(list(ring.patches)[-5:]):
        p, o = apply_patch(p, o, patch)
    q, r = ring.revert(*final(run40), 5)
    assert state_hash(p, o) == state_hash(q, r)


def test_replay_after_revert_restores(run40):
    u = 8
    p, o = run40.ring.revert(*final(run40), u)
    meta = dict(run40.result.checkpoints[0][2], logical_step=40 - u)
    rp, ro, rep = replay_filter((p, o, meta), run40.wal, run40.corpus)
    assert rep.applied_steps == u
    assert state_hash(rp, ro) == state_hash(*final(run40))


def test_wrong_state_rejected(run40):
    patch = run40.ring.patches[-1]
    with pytest.raises(PatchMismatchError):
        apply_patch(*run40.states[10], patch)


def test_gap_detected(run40):
    ring = RingBuffer(16)
    ring.patches.extend([run40.ring.patches[0], run40.ring.patches[2]])
    with pytest.raises(RingGapError):
        ring.revert(*final(run40), 2)
    with pytest.raises(RingGapError):
        RingBuffer(16).revert(*final(run40), 1)


def test_capture_discontinuity_clears(run40):
    ring = RingBuffer(4)
    (a, ao), (b, bo) = run40.states[1], run40.states[2]
    ring.capture(a, ao, b, bo, 1)
    ring.capture(a, ao, b, bo, 7)
    assert ring.steps() == [7]


def test_patch_file_round_trip(run40, tmp_path):
    patch = run40.ring.patches[-1]
    patch.save(tmp_path / "p.bin")
    back = DeltaPatch.load(tmp_path / "p.bin")
    assert back == patch
    run40.ring.save(tmp_path / "ring")
    again = RingBuffer.load(tmp_path / "ring", 16)
    assert state_hash(*again.revert(*final(run40), 16)) == state_hash(*run40.states[24])


def test_zlib_codec_exact(run40):
    (p0, o0), (p1, o1) = run40.states[30], run40.states[31]
    patch = capture_delta((p0, o0), (p1, o1), 30, XOR, "zlib")
    assert state_hash(*apply_patch(p1, o1, patch)) == state_hash(p0, o0)
    assert patch.stored_bytes < patch.pre_compress_bytes


@pytest.fixture(scope="module")
def arith_run(small_corpus, tmp_path_factory):
    return record_run(small_corpus, TrainConfig(total_steps=20, warmup_steps=2), tmp_path_factory.mktemp("arith"),
                      ring_window=16, ring_mode=ARITH, keep_states=True)


def ulps_apart(a, b):
    """Distance in units of the historical value's spacing."""
    return np.abs(a.astype(np.float64) - b.astype(np.float64)) / np.spacing(np.abs(b))


@pytest.mark.parametrize("u", [1, 8, 16])
def test_arith_revert_within_u_ulps(arith_run, u):
    p, _ = arith_run.ring.revert(*final(arith_run), u)
    hist, _ = arith_run.states[20 - u]
    for k in p:
        assert float(ulps_apart(p[k], hist[k]).max()) <= u, k


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.integers(1, 64))
def test_xor_self_inversion(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2**32, n, dtype=np.uint32).view(np.float32)
    y = rng.integers(0, 2**32, n, dtype=np.uint32).view(np.float32)
    d = x.view(np.uint32) ^ y.view(np.uint32)
    assert ((y.view(np.uint32) ^ d) ^ d).tobytes() == y.tobytes()
    assert (y.view(np.uint32) ^ d).tobytes() == x.tobytes()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 8))
def test_ring_property_random_walk(seed, window, steps):
    cfg = ModelConfig(vocab_size=5, context_len=2, embed_dim=2, hidden=3)
    p = init_params(cfg, seed)
    o = OptState.zeros(p)
    rng = np.random.default_rng(seed)
    ring, history = RingBuffer(window), [(p, o)]
    for t in range(steps):
        q = p.copy()
        for k in q:
            q[k] = (q[k] + rng.standard_normal(q[k].shape).astype(np.float32)).astype(np.float32)
        r = OptState({k: v + 1 for k, v in o.exp_avg.items()}, o.exp_avg_sq, o.step + 1)
        ring.capture(p, o, q, r, t)
        p, o = q, r
        history.append((p, o))
    assert len(ring) == min(window, steps)
    for u in range(len(ring) + 1):
        assert state_hash(*ring.revert(p, o, u)) == state_hash(*history[steps - u])


# --- budgets -------------------------------------------------------------------

def test_budget_full_checkpoint_13gb():
    rows = budget_report(int(1.3e9), 2)
    v = budget_value(rows, "full checkpoint (w+opt)")
    assert abs(v - 13.0e9) / 13.0e9 < 0.01
    assert budget_value(rows, "weights") == 2.6e9 and budget_value(rows, "optimizer moments") == 10.4e9


def test_budget_ring_row():
    rows = budget_report(1, per_step_bytes=406_456, N=16, ratio=0.70)
    assert budget_value(rows, "ring pre-compress total") == 6_503_296
    assert abs(budget_value(rows, "ring stored") - 4_552_307) <= 1


def test_budget_identity_ratio_and_latency():
    rows = budget_report(1000, 4, N=8, ratio=1.0, K=50, t_step=0.5, wal_records=400)
    assert budget_value(rows, "ring stored") == budget_value(rows, "ring pre-compress total") == 32000
    assert budget_value(rows, "worst-case replay latency") == 25.0
    assert budget_value(rows, "WAL") == 12_800
    with pytest.raises(ValueError):
        budget_report(0)
