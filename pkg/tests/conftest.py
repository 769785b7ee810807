"""Shared pytest plumbing: the acceptance-criteria summary block.

Acceptance tests call :func:`record_criterion`; the collected lines are
printed as one PASS/FAIL line per criterion at the end of the run, whatever
the individual test outcomes were.
"""

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


def record_criterion(num: int, name: str, ok: bool, detail: str = ""):
    _CRITERIA[num] = (name, bool(ok), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        name, ok, detail = _CRITERIA[num]
        status = "PASS" if ok else "FAIL"
        line = f"[criterion {num}] {status} {name}"
        if detail:
            line += f" -- {detail}"
        terminalreporter.write_line(line)
