import time

import numpy as np
import pytest

from drfuzzy.config import toy_config
from drfuzzy.workflow import run_training

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """The 600-image 3-class synthetic run, trained once per session."""
    out = tmp_path_factory.mktemp("toy_run")
    cfg = toy_config()
    start = time.perf_counter()
    outcome = run_training(cfg, out)
    return cfg, outcome, out, time.perf_counter() - start


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
