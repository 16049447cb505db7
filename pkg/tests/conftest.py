import pytest

_LINES_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES_KEY] = []


@pytest.fixture
def verdict_line(request, capsys):
    """Print one PASS/FAIL line immediately and repeat it in the terminal summary."""
    lines = request.config.stash[_LINES_KEY]

    def emit(text):
        lines.append(text)
        with capsys.disabled():
            print("\n" + text)

    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
