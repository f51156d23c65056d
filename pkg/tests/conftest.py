"""Per-criterion PASS/FAIL lines for the acceptance suite.

Tests marked ``@pytest.mark.criterion(n, "title")`` are collected here and
summarized at the end of the run, together with any measurements they
attach through the ``measure`` fixture.
"""

import pytest

_outcomes: dict[int, dict] = {}


def _entry(item):
    m = item.get_closest_marker("criterion")
    if m is None:
        return None
    n, title = m.args
    return _outcomes.setdefault(n, {"title": title, "passed": True, "ran": False, "notes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _entry(item)
    if entry is None:
        return
    if rep.when == "call":
        entry["ran"] = True
    if rep.failed:
        entry["passed"] = False
        entry["ran"] = True


@pytest.fixture
def measure(request):
    entry = _entry(request.node)

    def note(text: str):
        if entry is not None:
            entry["notes"].append(text)

    return note


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for n in sorted(_outcomes):
        e = _outcomes[n]
        status = ("PASS" if e["passed"] else "FAIL") if e["ran"] else "SKIP"
        notes = "; ".join(e["notes"])
        tr.write_line(f"{status}  criterion {n}: {e['title']}" + (f"  [{notes}]" if notes else ""))
