import json
import shutil

import pytest

from exactunlearn.cli import EXIT_AUDIT, EXIT_INTEGRITY, EXIT_OK, EXIT_REFUSED, KEY_ENV, TOY_KEY_WARNING, Workspace, main
from exactunlearn.closure import SimHashIndex, expand_closure

TRAIN = ["--steps", "30", "--warmup", "3", "--checkpoint-every", "10", "--cohort-steps", "4"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(autouse=True)
def no_key(monkeypatch):
    monkeypatch.delenv(KEY_ENV, raising=False)


@pytest.fixture(scope="module")
def trained_ws(tmp_path_factory):
    ws = tmp_path_factory.mktemp("ws") / "run"
    assert main(["gen-corpus", "-w", str(ws)]) == EXIT_OK
    assert main(["train", "-w", str(ws), *TRAIN]) == EXIT_OK
    return ws


@pytest.fixture
def ws(trained_ws, tmp_path):
    d = tmp_path / "run"
    shutil.copytree(trained_ws, d)
    return d


def test_gen_corpus_counts_and_determinism(capsys, tmp_path):
    code, out, _ = run(capsys, "gen-corpus", "-w", str(tmp_path / "a"))
    a = json.loads(out)
    assert code == EXIT_OK
    assert (a["training_samples"], a["forget"], a["retain"]) == (2009, 45, 1964)
    _, out, _ = run(capsys, "gen-corpus", "-w", str(tmp_path / "b"))
    assert json.loads(out)["digest"] == a["digest"]


def test_gen_corpus_without_duplicates_has_singleton_closure(capsys, tmp_path):
    code, _, _ = run(capsys, "gen-corpus", "-w", str(tmp_path), "--dup-rate", "0", "--size", "400",
                     "--forget", "20")
    assert code == EXIT_OK
    w = Workspace(tmp_path)
    corpus = w.corpus()
    request = json.loads((tmp_path / w.load()["request"]).read_text())["sample_ids"]
    ids = [i for i in corpus.ids() if corpus.docs[i].split != "control"]
    assert expand_closure(request, SimHashIndex(corpus, ids)).expanded == set(request)


def test_toy_key_warning_on_stderr(capsys, ws):
    code, out, err = run(capsys, "verify-wal", "-w", str(ws))
    assert code == EXIT_OK and json.loads(out)["ok"]


def test_verify_wal_detects_truncation(capsys, ws):
    seg = sorted((ws / "wal").glob("*.wal"))[-1]
    seg.write_bytes(seg.read_bytes()[:-32])
    code, out, _ = run(capsys, "verify-wal", "-w", str(ws))
    assert code == EXIT_INTEGRITY and json.loads(out)["failures"][0]["kind"] == "record_count"


def test_replay_empty_passes(capsys, ws):
    code, out, _ = run(capsys, "replay", "-w", str(ws), "--empty")
    assert code == EXIT_OK and "PASS" in out


def test_replay_forget_request_passes(capsys, ws):
    code, out, _ = run(capsys, "replay", "-w", str(ws))
    assert code == EXIT_OK and "PASS" in out


def test_revert(capsys, ws):
    code, out, _ = run(capsys, "revert", "-w", str(ws), "-u", "3")
    assert code == EXIT_OK
    code, _, err = run(capsys, "revert", "-w", str(ws), "-u", "999")
    assert code == EXIT_REFUSED and err


def test_cohort_forget_deletes_adapter(capsys, ws, trained_ws):
    corpus = Workspace(ws).corpus()
    members = [i for i in corpus.ids("cohort") if corpus.docs[i].cohort == 2]
    req = ws / "cohort-request.json"
    req.write_text(json.dumps({"request_id": "77", "sample_ids": members, "urgency": "NORMAL"}))
    code, out, err = run(capsys, "forget", "-w", str(ws), "--request", str(req))
    entry = json.loads(out)[-1]
    assert entry["path_taken"] == "ADAPTER_DELETE"
    assert code == (EXIT_OK if entry["servable"] else EXIT_AUDIT)
    assert TOY_KEY_WARNING in err
    assert not (ws / "adapters" / "adapter-0002.bin").exists()
    assert (trained_ws / "adapters" / "adapter-0002.bin").exists()  # the copy is self-contained
    # idempotent: the same request id returns the recorded entry without a new append
    size = (ws / "manifest.log").stat().st_size
    again, out, _ = run(capsys, "forget", "-w", str(ws), "--request", str(req))
    assert again == code and json.loads(out)[-1]["seq"] == entry["seq"]
    assert (ws / "manifest.log").stat().st_size == size


def test_forced_audit_failure_exit_code(capsys, ws):
    code, out, _ = run(capsys, "forget", "-w", str(ws), "--force-audit-fail", "retain_ppl")
    assert code == EXIT_AUDIT and "EXACT_REPLAY" in out


def test_audit_prints_table(capsys, ws):
    code, out, _ = run(capsys, "audit", "-w", str(ws))
    assert code in (EXIT_OK, EXIT_AUDIT)
    for name in ("mia_auc", "canary_exposure", "targeted_extraction", "fuzzy_recall", "retain_ppl"):
        assert name in out


def test_ci_gate_exit_codes(capsys, ws):
    assert run(capsys, "ci-gate", "-w", str(ws), "--steps", "5")[0] == EXIT_OK
    assert run(capsys, "ci-gate", "-w", str(ws), "--steps", "5", "--inject-fault")[0] == 1
    assert run(capsys, "ci-gate", "-w", str(ws), "--steps", "5", "--truncate-wal")[0] == 3


def test_budget_table(capsys, tmp_path):
    code, out, _ = run(capsys, "budget", "--json", str(tmp_path / "b.json"))
    assert code == EXIT_OK and "≈ 13.0 GB" in out
    rows = json.loads((tmp_path / "b.json").read_text())
    assert rows


def test_missing_workspace_refused(capsys, tmp_path):
    code, _, err = run(capsys, "replay", "-w", str(tmp_path / "nope"), "--empty")
    assert code == EXIT_REFUSED and err


def test_key_file_silences_warning(capsys, tmp_path):
    key = tmp_path / "key"
    key.write_bytes(b"k" * 32)
    w = tmp_path / "run"
    main(["gen-corpus", "-w", str(w), "--size", "300", "--forget", "10"])
    capsys.readouterr()
    code, _, err = run(capsys, "train", "-w", str(w), "--key-file", str(key), "--steps", "4", "--warmup", "1",
                       "--cohort-steps", "0")
    assert code == EXIT_OK and TOY_KEY_WARNING not in err
    assert run(capsys, "verify-wal", "-w", str(w), "--key-file", str(key))[0] == EXIT_OK
    assert run(capsys, "verify-wal", "-w", str(w))[0] == EXIT_INTEGRITY
