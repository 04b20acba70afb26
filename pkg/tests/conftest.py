import asyncio
import logging

import pytest

_criteria: dict[int, list] = {}


def run(coro, timeout: float = 60.0):
    """Run a coroutine on a fresh event loop with a hard timeout."""
    return asyncio.run(asyncio.wait_for(coro, timeout))


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.failed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, [title, True, ""])
    entry[1] = entry[1] and report.passed
    details = [str(v) for k, v in item.user_properties if k == "detail"]
    if details:
        entry[2] = "; ".join(details)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok, detail = _criteria[number]
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
