import pytest

CRITERIA = {}


@pytest.fixture
def record():
    """Store one verdict line per acceptance criterion."""

    def _record(number, passed, detail, seconds):
        CRITERIA[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  " \
                           f"({detail}; {seconds:.1f} s)"
        print(CRITERIA[number])

    return _record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
