import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "gradient fidelity",
    2: "RRT* optimality trend",
    3: "completeness proxy",
    4: "desk-scale speedup direction",
    5: "informed RRT* correctness",
    6: "CAE quality",
    7: "determinism suite",
    8: "feasibility invariant",
}

_status: dict = {}
_details: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if rep.failed:
        _status[n] = "FAIL"
    elif rep.when == "call" and rep.passed:
        _status.setdefault(n, "PASS")
    elif rep.skipped:
        _status.setdefault(n, "SKIP")


@pytest.fixture
def detail(request):
    """Attach a measurement to the criterion's summary line."""
    marker = request.node.get_closest_marker("criterion")

    def add(text: str):
        _details.setdefault(marker.args[0], []).append(text)

    return add


def pytest_terminal_summary(terminalreporter):
    if not _status:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        status = _status.get(n, "NOT RUN")
        extra = "; ".join(_details.get(n, []))
        terminalreporter.write_line(f"criterion {n} ({name}): {status}" +
                                    (f"  [{extra}]" if extra else ""))
