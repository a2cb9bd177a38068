"""Acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary."""

import pytest

CRITERIA = {
    1: "extrapolator hand case and constant fixed point",
    2: "extrapolator reduction properties",
    3: "smoother comparison on the jittered phasor stream",
    4: "local load-group fidelity against 1 ms truth",
    5: "latency model calibration",
    6: "delay decomposition and propagation bound",
    7: "Modbus conformance",
    8: "bridge resilience and 24 h soak",
    9: "determinism of virtual runs",
}

_outcomes: dict[int, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion exercised by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(n, []).append((item.name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(CRITERIA):
        results = _outcomes.get(n)
        if not results:
            continue
        failed = [name for name, o in results if o == "failed"]
        skipped = [name for name, o in results if o == "skipped"]
        status = "FAIL" if failed else ("SKIP" if skipped else "PASS")
        line = f"criterion {n}: {status}  {CRITERIA[n]}"
        if failed:
            line += f"  (failing: {', '.join(failed)})"
        terminalreporter.write_line(line)
