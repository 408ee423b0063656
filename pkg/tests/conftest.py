import re
from collections import OrderedDict

_CRITERION = re.compile(r"test_c(\d+)_")
_results: "OrderedDict[int, list]" = OrderedDict()
_titles: dict[int, str] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        m = _CRITERION.match(item.name)
        if m and item.get_closest_marker("acceptance"):
            n = int(m.group(1))
            _results.setdefault(n, [])
            doc = (item.module.__dict__.get("CRITERIA") or {}).get(n)
            if doc:
                _titles[n] = doc


def pytest_runtest_logreport(report):
    m = _CRITERION.match(report.nodeid.rsplit("::", 1)[-1])
    if not m or int(m.group(1)) not in _results:
        return
    if report.when == "call" or report.outcome != "passed":
        _results[int(m.group(1))].append((report.nodeid, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        outcomes = [o for _, o in _results[n]]
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {_titles.get(n, '')}")
