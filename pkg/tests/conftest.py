import os

# every Sinkhorn value computed during the tests checks the transport bound
os.environ.setdefault("KNOT_CHECK_INVARIANTS", "1")

import time

import numpy as np
import pytest

# (criterion number, title, passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {num:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_simplex(rng, n, floor=0.0, size=None):
    p = rng.dirichlet(np.ones(n), size=size)
    if floor:
        p = np.maximum(p, floor)
        p = p / p.sum(axis=-1, keepdims=True)
    return p


class PipelineRuns:
    """Full default-config CLI runs, shared by every test in the session."""

    def __init__(self, root):
        self.root = root
        self._done = {}
        self.seconds = {}

    def run(self, seed=0, tag="a"):
        from knot.cli import main

        key = (seed, tag)
        if key not in self._done:
            out = self.root / f"seed{seed}-{tag}"
            t0 = time.perf_counter()
            assert main(["run", "--seed", str(seed), "--output-dir", str(out)]) == 0
            self.seconds[key] = time.perf_counter() - t0
            self._done[key] = out
        return self._done[key]


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    return PipelineRuns(tmp_path_factory.mktemp("pipeline"))
