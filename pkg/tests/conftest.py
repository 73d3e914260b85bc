"""Acceptance bookkeeping: one PASS/FAIL line per numbered criterion."""
from collections import OrderedDict

import pytest

_results = OrderedDict()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    number, title = marker.args
    entry = _results.setdefault(number, {"title": title, "ok": True, "notes": []})
    entry["ok"] &= report.passed
    if not report.passed:
        entry["notes"].append(f"{item.name} {report.outcome}")
    for key, value in report.user_properties:
        entry["notes"].append(f"{key}={value}")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        status = "PASS" if entry["ok"] else "FAIL"
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {number:>2} {status}  {entry['title']}"
                                    + (f"  [{notes}]" if notes else ""))
