import pytest

ACCEPTANCE: dict[str, tuple[bool, str]] = {}
CRITERIA = [f"AC-{i}" for i in range(1, 14)]


@pytest.fixture
def report():
    """Record one acceptance outcome, print it, and return the pass flag."""

    def record(ac: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[ac] = (bool(ok), detail)
        print(f"{ac} {'PASS' if ok else 'FAIL'} {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for ac in CRITERIA:
        if ac in ACCEPTANCE:
            ok, detail = ACCEPTANCE[ac]
            terminalreporter.write_line(f"{ac} {'PASS' if ok else 'FAIL'} {detail}")
        else:
            terminalreporter.write_line(f"{ac} NOT RUN")
