import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest

from tntprune.rng import RngStream


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def stream():
    return RngStream(seed=7, stream_id=3)


# ----------------------------------------------------------------- acceptance report

_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criterion(request):
    """``criterion(n, ok, detail)`` records the verdict line printed in the summary."""
    lines = request.config.stash.setdefault(_CRITERIA, {})

    def record(n, ok, detail):
        lines[n] = f"[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}"
        print(lines[n])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 9):
        # a criterion whose test errored before recording, or was deselected
        terminalreporter.write_line(lines.get(n, f"[criterion {n}] NOT RUN (no verdict recorded)"))
