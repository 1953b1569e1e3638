import pytest

from calderonet.fem import generate_mesh


@pytest.fixture(scope="session")
def mesh05():
    return generate_mesh(0.05)


@pytest.fixture(scope="session")
def mesh10():
    return generate_mesh(0.1)


@pytest.fixture(scope="session")
def mesh025():
    return generate_mesh(0.025)


VERDICTS: list = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
