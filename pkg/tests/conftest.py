"""Shared fixtures: one calibrated model per session, memoized corpora."""

import pytest
from hypothesis import settings

from splitstream import SplitModel, collect_stats

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")

# acceptance-criteria verdicts, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES,
                           key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def model():
    """Default-seed model; calibration is expensive, build it once."""
    return SplitModel()


@pytest.fixture(scope="session")
def corpus_at(model):
    """Memoized (tensors, stats) per (cut, n_images)."""
    cache = {}

    def get(cut: str, n: int):
        key = (cut, n)
        if key not in cache:
            tensors = [
                model.forward_client(model.generate_input(i), cut)
                for i in range(n)
            ]
            cache[key] = (tensors, collect_stats(tensors, label=cut))
        return cache[key]

    return get
