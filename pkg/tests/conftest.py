import sys

import pytest


@pytest.fixture(scope="session")
def mnist():
    from merlin.data import load_mnist
    try:
        return load_mnist()
    except (FileNotFoundError, OSError) as exc:
        pytest.skip(f"MNIST IDX files not available: {exc}")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
