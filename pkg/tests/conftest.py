"""Collects the one-line verdicts of the acceptance criteria and prints them
at the end of the session."""

_VERDICTS = []


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    for key, value in report.user_properties:
        if key == "criterion":
            n, title, detail = value
            _VERDICTS.append((n, "PASS" if report.passed else "FAIL", title, detail))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, verdict, title, detail in sorted(_VERDICTS):
        terminalreporter.write_line(f"criterion {n:2d} {verdict}  {title}: {detail}")
