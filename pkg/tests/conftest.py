"""Acceptance reporting: run criterion tests last and summarize them."""

RESULTS: dict[str, str] = {}
CRITERIA: list = []


def pytest_configure(config):
    config.hsmlab_results = RESULTS


def pytest_collection_modifyitems(session, config, items):
    # Criteria 8 and 9 reuse the outcomes of the property suites, so the
    # acceptance file goes after everything else.
    items.sort(key=lambda it: it.path.name == "test_acceptance.py")


def pytest_collection_finish(session):
    # after -m / -k deselection
    CRITERIA[:] = [it for it in session.items if it.get_closest_marker("criterion")]


def pytest_runtest_logreport(report):
    # keep the worst phase outcome per test
    if report.when == "call" or report.outcome != "passed":
        if RESULTS.get(report.nodeid) in (None, "passed"):
            RESULTS[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance")
    rows = []
    for item in CRITERIA:
        n, title = item.get_closest_marker("criterion").args
        outcome = RESULTS.get(item.nodeid)
        verdict = {"passed": "PASS", None: "NOT RUN"}.get(outcome, "FAIL")
        rows.append((n, f"criterion {n}: {verdict}  {title}"))
    for _, line in sorted(rows):
        terminalreporter.write_line(line)
