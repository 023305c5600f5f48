import pytest

_ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(number, title)(passed, detail)``."""

    def start(number: int, title: str):
        _ACCEPTANCE[number] = (title, False, "did not complete")

        def finish(passed: bool, detail: str) -> bool:
            _ACCEPTANCE[number] = (title, bool(passed), detail)
            return bool(passed)

        return finish

    return start


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")
