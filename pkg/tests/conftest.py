import pytest

ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


@pytest.fixture(scope="session")
def record():
    """``record(n, title, passed, detail)`` stores one acceptance verdict for the end-of-run summary."""

    def _record(n: int, title: str, passed: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(passed), title, detail)
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {n}: {title} | {detail}")

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title} | {detail}")
