import time

import numpy as np
import pytest

from vitsink.bench import standard_experiment
from vitsink.data import Vocab, gen_dataset
from vitsink.fixtures import build_fixture
from vitsink.pipeline import build_vlm

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}"
    if detail:
        line += f" ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def vocab():
    return Vocab()


@pytest.fixture(scope="session")
def injected():
    return build_fixture("injected", 0, k=3, gain=40.0)


@pytest.fixture
def small_vlm(injected, vocab):
    vit, rep = injected
    return build_vlm(vit, rep.tau, seed=0, vocab=vocab)


@pytest.fixture(scope="session")
def small_data(vocab):
    return gen_dataset(11, (6, 6, 6), vocab)


@pytest.fixture(scope="session")
def trained_run():
    """Injected fixture, dual pretraining and joint fine-tuning; a few minutes on one core."""
    start = time.perf_counter()
    run = standard_experiment(seed=0)
    run.elapsed = time.perf_counter() - start
    return run


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
