"""Prints one PASS/FAIL line per acceptance criterion at the end of a run."""

import pytest

_results: dict[int, list] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("acceptance")
        if mark is not None:
            _results.setdefault(mark.args[0], [mark.args[1], None, ""])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    entry = _results[mark.args[0]]
    if rep.failed or rep.when == "call":
        ok = rep.passed
        entry[1] = ok if entry[1] is None else (entry[1] and ok)
        detail = dict(item.user_properties).get("measured")
        if detail:
            entry[2] = detail


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_results):
        title, ok, detail = _results[n]
        status = "NOT RUN" if ok is None else ("PASS" if ok else "FAIL")
        tr.write_line(f"{status:7s}  {n:2d}. {title}" + (f"  [{detail}]" if detail else ""))
