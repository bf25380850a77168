"""Shared pytest plumbing: a recorder that prints one line per acceptance
criterion at the end of the session."""

ACCEPTANCE_RESULTS = []


def record_acceptance(number, passed, detail=""):
    ACCEPTANCE_RESULTS.append((number, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        line = f"criterion {number:>2}: {status}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
