import contextlib

CRITERIA: dict[int, tuple[str, str, str]] = {}


@contextlib.contextmanager
def criterion(number: int, name: str):
    """Record PASS/FAIL for an acceptance criterion; ``note`` is filled in by the caller."""
    note = []
    try:
        yield note
    except BaseException:
        CRITERIA[number] = ("FAIL", name, "; ".join(note))
        raise
    CRITERIA[number] = ("PASS", name, "; ".join(note))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        status, name, note = CRITERIA[n]
        terminalreporter.write_line(f"{status} criterion {n}: {name}" + (f" ({note})" if note else ""))
