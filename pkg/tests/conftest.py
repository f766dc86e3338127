import pytest

from dynqkd import fixtures


@pytest.fixture(scope="session")
def calib():
    return fixtures.default_calibration()


@pytest.fixture(scope="session")
def mesh():
    return fixtures.testbed_topology()


@pytest.fixture(scope="session")
def rows():
    return fixtures.table3_rows()


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, title, detail = RESULTS[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
