import pytest

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(cid, text): acceptance criterion, reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        measured = dict(item.user_properties).get("measured", "")
        reason = rep.longrepr[2] if rep.skipped and isinstance(rep.longrepr, tuple) else ""
        _CRITERIA.append((mark.args[0], mark.args[1], rep.outcome, measured or reason))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    label = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}
    grouped = {}
    for cid, text, outcome, note in _CRITERIA:
        grouped.setdefault((cid, text), []).append((outcome, note))
    for (cid, text), cases in sorted(grouped.items()):
        outcomes = {o for o, _ in cases}
        overall = "failed" if "failed" in outcomes else "passed" if "passed" in outcomes else "skipped"
        if len(cases) == 1:
            note = cases[0][1]
        else:
            counts = ", ".join(f"{sum(o == k for o, _ in cases)} {k}" for k in ("passed", "failed", "skipped")
                               if k in outcomes)
            shown = [n for o, n in cases if o == "failed"] or [cases[0][1]]
            note = f"{len(cases)} cases: {counts}; " + "; ".join(shown)
        terminalreporter.write_line(f"{label[overall]}  {cid:<4} {text}" + (f"  [{note}]" if note else ""))
