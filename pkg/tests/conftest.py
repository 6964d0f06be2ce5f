import pytest

from builders import column_problem, dam_problem, solve


@pytest.fixture(scope="session")
def dam128():
    pb = dam_problem(128)
    return pb, solve(pb)


@pytest.fixture(scope="session")
def dam256():
    pb = dam_problem(256)
    return pb, solve(pb)


@pytest.fixture(scope="session")
def dam64():
    pb = dam_problem(64)
    return pb, solve(pb)


@pytest.fixture(scope="session")
def column128():
    pb = column_problem(128)
    return pb, solve(pb)


_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(k, ok, detail):
        line = f"CRITERION {k:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        _CRITERIA[k] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
