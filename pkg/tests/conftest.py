import numpy as np
import pytest
from hypothesis import settings

from diffconv import _backend

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(params=_backend.BACKENDS)
def backend(request):
    """Run the test once per kernel backend."""
    with _backend.use_backend(request.param):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def brute_ball(keys, sources, sq_radius):
    """Independent per-key loop: indices with squared distance strictly below the bound."""
    sq_radius = np.broadcast_to(np.asarray(sq_radius, dtype=float), (len(keys),))
    out = []
    for k, r2 in zip(keys, sq_radius):
        d2 = [float(np.dot(k - s, k - s)) for s in sources]
        out.append([j for j, d in enumerate(d2) if d < r2])
    return out


def brute_knn(keys, sources, k):
    out = []
    for key in keys:
        d2 = ((sources - key) ** 2).sum(axis=1)
        out.append(sorted(np.argsort(d2, kind="stable")[:k].tolist()))
    return out


# acceptance verdicts, printed as one line per criterion at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        passed, title, detail = ACCEPTANCE[num]
        terminalreporter.write_line(
            f"criterion {num:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
