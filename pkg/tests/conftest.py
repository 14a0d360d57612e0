import pytest

_VERDICTS: list[str] = []


class Criterion:
    """Records one acceptance verdict line; the assertion still decides pass/fail."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title

    def check(self, ok: bool, detail: str) -> None:
        line = f"AC{self.number} {'PASS' if ok else 'FAIL'} {self.title}: {detail}"
        _VERDICTS.append(line)
        print(line)
        assert ok, line


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[0][2:])):
            terminalreporter.write_line(line)
