"""Shared fixtures: the default corpus and a short recorded run with WAL, checkpoints and ring."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import pytest

from exactunlearn.corpus import Corpus, CorpusProfile, Document, generate_corpus
from exactunlearn.dettrain.optim import TrainConfig
from exactunlearn.dettrain.trainer import CheckpointPolicy, TrainRunResult, run_meta, train
from exactunlearn.ring import RingBuffer
from exactunlearn.wal import WalLog, WalWriter

RUN_ID = b"test-run-0000000"


def make_corpus(texts, split="base") -> Corpus:
    return Corpus({i + 1: Document(i + 1, t, split) for i, t in enumerate(texts)})


@dataclass
class RecordedRun:
    corpus: Corpus
    cfg: TrainConfig
    result: TrainRunResult
    wal: WalLog
    wal_dir: Path
    ring: RingBuffer | None
    states: dict  # logical step -> (params, opt) after that many updates


def record_run(corpus, cfg, directory, ring_window=0, ring_mode="xor", every=0, key=None,
               keep_states=False) -> RecordedRun:
    ring = RingBuffer(ring_window, mode=ring_mode) if ring_window else None
    states = {}
    hook = (lambda t, p, o: states.__setitem__(t + 1, (p.copy(), o.copy()))) if keep_states else None
    wdir = Path(directory) / "wal"
    with WalWriter(wdir, RUN_ID, key=key, run_meta=run_meta(cfg, corpus)) as w:
        res = train(corpus, cfg, wal=w, ckpt_policy=CheckpointPolicy(every=every, at_steps=(0,)),
                    ring=ring, on_step=hook)
    return RecordedRun(corpus, cfg, res, WalLog(wdir, key), wdir, ring, states)


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus()[0]


@pytest.fixture(scope="session")
def request_ids():
    return generate_corpus()[1]


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(CorpusProfile(size=300, forget=15, n_controls=15, cohort_size=8, seed=7))[0]


@pytest.fixture(scope="session")
def run40(corpus, tmp_path_factory):
    """40 steps x 2 microbatches of 8, checkpoints every 10, XOR ring of 16, per-step states kept."""
    cfg = TrainConfig(total_steps=40, warmup_steps=5)
    return record_run(corpus, cfg, tmp_path_factory.mktemp("run40"), ring_window=16, every=10,
                      keep_states=True)


# --- acceptance reporting --------------------------------------------------------

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _criteria[n] = (title, "PASS" if rep.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}  {status}  {title}")
