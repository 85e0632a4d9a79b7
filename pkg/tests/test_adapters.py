import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exactunlearn.adapters import (Adapter, AdapterError, AdapterNotFound, AdapterRegistry, EscalateToReplay,
                                   FreezeViolation, compact_adapters, compose, init_adapter, train_cohort)
from exactunlearn.dettrain.checkpoint import model_hash
from exactunlearn.dettrain.model import forward_loss_sum
from exactunlearn.dettrain.optim import TrainConfig

CFG = TrainConfig(total_steps=6, warmup_steps=1, base_lr=3e-3)


@pytest.fixture(scope="module")
def base(run40):
    return run40.result.params


@pytest.fixture(scope="module")
def trained(base, corpus):
    return {j: train_cohort(base, corpus, j, CFG, steps=6) for j in (1, 2)}


def same(a, b):
    return set(a) == set(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)


def cohort_ids(corpus, j):
    return [i for i in corpus.ids("cohort") if corpus.docs[i].cohort == j]


def test_zero_steps_contributes_nothing(base, corpus):
    ad = train_cohort(base, corpus, 1, CFG, steps=0)
    for layer, (A, B) in ad.factors.items():
        assert not B.any() and not ad.contribution(layer).any()
    assert same(compose(base, [ad]), base)


def test_training_leaves_base_untouched(base, corpus, trained):
    before = model_hash(base)
    train_cohort(base, corpus, 3, CFG, steps=2)
    assert model_hash(base) == before
    assert all(trained[j].base_hash == before for j in trained)
    assert any(trained[1].factors[k][1].any() for k in trained[1].factors)


def test_adapter_lowers_cohort_loss(base, corpus, trained):
    ids = cohort_ids(corpus, 1)
    assert forward_loss_sum(compose(base, [trained[1]]), corpus, ids)[0] < forward_loss_sum(base, corpus, ids)[0]


def test_two_path_forward_equality(base, corpus, trained):
    ad = trained[1]
    explicit = base.copy()
    for layer, (A, B) in ad.factors.items():
        explicit[layer] = explicit[layer] + (A.astype(np.float64) @ B.astype(np.float64).T).astype(np.float32)
    served = compose(base, [ad])
    assert same(served, explicit)
    ids = cohort_ids(corpus, 1)[:8]
    assert forward_loss_sum(served, corpus, ids) == forward_loss_sum(explicit, corpus, ids)


def test_delete_only_cohort_restores_base(base, trained):
    reg = AdapterRegistry(base)
    reg.add(trained[1])
    assert not same(reg.serving(), base)
    rec = reg.delete(1)
    assert same(reg.serving(), base) and rec["served_hash"] == model_hash(base)


def test_delete_one_of_two_equals_fresh_compose(base, trained):
    reg = AdapterRegistry(base)
    reg.add(trained[1])
    reg.add(trained[2])
    reg.delete(1)
    assert same(reg.serving(), compose(base, [trained[2]]))
    with pytest.raises(AdapterNotFound):
        reg.delete(1)


def test_merged_and_compacted_escalate(base, trained):
    reg = AdapterRegistry(base)
    with pytest.raises(AdapterError):
        reg.add(Adapter(9, trained[1].factors, merged=True, base_hash=trained[1].base_hash))
    reg.add(trained[1])
    reg.add(trained[2])
    served = reg.serving()
    merged = reg.compact([1, 2])
    assert merged.members == (1, 2) and not merged.deletable
    assert reg.lost_deletability == {1, 2}
    for j in (1, 2):
        assert reg.owner_of(j) == 1
        with pytest.raises(EscalateToReplay):
            reg.delete(j)
    diff = max(float(np.max(np.abs(reg.serving()[k].astype(np.float64) - served[k]))) for k in served)
    assert diff < 1e-5


def test_base_change_escalates(base, trained):
    reg = AdapterRegistry(base)
    reg.add(trained[1])
    reg.base_hash = "changed"
    with pytest.raises(EscalateToReplay):
        reg.delete(1)


def test_add_against_other_base_is_freeze_violation(run40, trained):
    reg = AdapterRegistry(run40.states[10][0])
    with pytest.raises(FreezeViolation):
        reg.add(trained[1])


def test_compact_singleton_bit_equal(trained):
    c = compact_adapters([trained[1]])
    for layer in trained[1].factors:
        assert c.contribution(layer).tobytes() == trained[1].contribution(layer).tobytes()


def test_compact_two_rank_one_exact():
    a = Adapter(1, {"w1": (np.array([[1.0], [2.0]], np.float32), np.array([[3.0], [-1.0], [0.5]], np.float32))})
    b = Adapter(2, {"w1": (np.array([[-2.0], [0.25]], np.float32), np.array([[1.0], [4.0], [2.0]], np.float32))})
    c = compact_adapters([a, b])
    assert c.rank("w1") == 2
    assert c.contribution("w1").tobytes() == (a.contribution("w1") + b.contribution("w1")).tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.lists(st.integers(1, 4), min_size=3, max_size=3))
def test_compact_matches_summed_contributions(seed, ranks):
    """Block concatenation equals the exactly summed products, rounded once."""
    rng = np.random.default_rng(seed)
    ads = [Adapter(j + 1, {"w1": (rng.standard_normal((12, r)).astype(np.float32),
                                  rng.standard_normal((7, r)).astype(np.float32))}) for j, r in enumerate(ranks)]
    got = compact_adapters(ads).contribution("w1")
    exact = sum(a.factors["w1"][0].astype(np.float64) @ a.factors["w1"][1].astype(np.float64).T for a in ads)
    ref = exact.astype(np.float32)
    ulps = np.abs(got.astype(np.float64) - ref) / np.spacing(np.abs(ref))
    assert float(ulps.max()) <= 1


def test_crash_between_delete_and_manifest_is_repaired(base, trained, tmp_path):
    reg = AdapterRegistry(base, tmp_path / "reg")
    reg.add(trained[1])
    reg.add(trained[2])
    log = []
    with pytest.raises(RuntimeError):
        reg.delete(1, log.append, crash_after_remove=True)
    assert log == []
    reopened = AdapterRegistry(base, tmp_path / "reg")
    assert [e["cohort"] for e in reopened.pending()] == [1]
    assert reopened.cohorts() == [2]
    done = reopened.repair(log.append)
    assert len(done) == 1 and log[0]["cohort"] == 1 and log[0]["repaired"]
    assert reopened.pending() == []
    assert same(reopened.serving(), compose(base, [trained[2]]))
    with pytest.raises(FreezeViolation):
        AdapterRegistry(compose(base, [trained[1]]), tmp_path / "reg")


def test_adapter_file_round_trip(trained, tmp_path):
    ad = trained[2]
    ad.save(tmp_path / "a.bin")
    back = Adapter.load(tmp_path / "a.bin")
    assert back.cohort_id == 2 and back.base_hash == ad.base_hash and back.members == (2,)
    for layer in ad.factors:
        assert back.contribution(layer).tobytes() == ad.contribution(layer).tobytes()
    data = bytearray((tmp_path / "a.bin").read_bytes())
    data[40] ^= 1
    (tmp_path / "b.bin").write_bytes(bytes(data))
    with pytest.raises(Exception):
        Adapter.load(tmp_path / "b.bin")


def test_init_is_deterministic(base):
    a, b = init_adapter(base, 3, seed=5), init_adapter(base, 3, seed=5)
    assert all(a.factors[k][0].tobytes() == b.factors[k][0].tobytes() for k in a.factors)


def test_registry_directory_is_relocatable(base, trained, tmp_path):
    import shutil
    reg = AdapterRegistry(base, tmp_path / "a")
    reg.add(trained[1])
    shutil.move(tmp_path / "a", tmp_path / "b")
    moved = AdapterRegistry(base, tmp_path / "b")
    assert same(moved.serving(), compose(base, [trained[1]]))
    moved.delete(1)
    assert not any((tmp_path / "b").glob("adapter-*.bin"))
