import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dualfilter.hmm import Hmm

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_hmm(rng, d, m, alpha=1.0):
    """Full-support random HMM with Dirichlet(alpha) rows."""
    return Hmm(rng.dirichlet(np.full(d, alpha), d), rng.dirichlet(np.full(m + 1, alpha), d),
               rng.dirichlet(np.full(d, alpha)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, (ok, detail) in sorted(mod.RESULTS.items()):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
