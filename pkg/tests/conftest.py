import numpy as np
import pytest


def pytest_addoption(parser):
    parser.addoption("--slow", action="store_true", default=False, help="run the long CIFAR trend check")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running check, enabled with --slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow"):
        return
    skip = pytest.mark.skip(reason="needs --slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL/SKIP line per criterion; all lines are echoed in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(number, status, detail):
        line = f"criterion {number}: {status} - {detail}"
        lines.append(line)
        print(line)
        return status == "PASS"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
