"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion check")
    config.stash[RESULTS] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    number, title = mark.args
    entry = item.config.stash[RESULTS].setdefault(number, {"title": title, "status": "PASS",
                                                           "details": []})
    if hasattr(rep, "wasxfail"):
        status = "FAIL (known, see decisions ledger)"
    elif rep.failed:
        status = "FAIL"
    elif rep.skipped:
        status = "SKIPPED"
    else:
        status = "PASS"
    if status != "PASS" and entry["status"] != "FAIL":
        entry["status"] = status
    entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        r = results[number]
        terminalreporter.write_line(f"[{r['status']}] criterion {number}: {r['title']}")
        for d in r["details"]:
            terminalreporter.write_line(f"        {d}")
