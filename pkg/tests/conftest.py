import pytest

# (criterion number, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list = []


@pytest.fixture
def verdict(capsys):
    def record(number: int, title: str, passed: bool, detail: str):
        line = f"CRITERION {number} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
