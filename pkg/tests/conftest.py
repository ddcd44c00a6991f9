"""Prints a PASS/FAIL line per acceptance criterion after the run."""

_ACCEPTANCE = []


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = props.get("detail", "")
        if report.failed:
            crash = getattr(report.longrepr, "reprcrash", None)
            detail = (crash.message if crash else str(report.longrepr)).splitlines()[0]
        _ACCEPTANCE.append((props["criterion"], report.outcome, report.duration, detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, seconds, detail in _ACCEPTANCE:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}  ({seconds:.1f} s)  {detail}")
