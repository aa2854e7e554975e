import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# Derandomized so property runs are reproducible from run to run.
settings.register_profile("seeded", derandomize=True, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("seeded")

CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion."""
    state = {}

    def record(number, ok, detail):
        state.update(number=number, ok=bool(ok), detail=detail)
        return bool(ok)

    yield record
    if state:
        line = f"criterion {state['number']}: {'PASS' if state['ok'] else 'FAIL'}  {state['detail']}"
    else:
        line = f"{request.node.name}: FAIL  (raised before a result was recorded)"
    print(line)
    request.config.stash.setdefault(CRITERIA, []).append(line)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
