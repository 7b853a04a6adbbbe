import pytest

# criterion id -> (passed, detail), filled by test_acceptance
CRITERIA = {}


@pytest.fixture
def record():
    def put(cid, passed, detail):
        CRITERIA[cid] = (bool(passed), detail)
        return passed
    return put


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(CRITERIA):
        passed, detail = CRITERIA[cid]
        terminalreporter.write_line(f"criterion {cid}: {'PASS' if passed else 'FAIL'}  {detail}")
