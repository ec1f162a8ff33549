import pytest

# criterion id -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def report(cid: int, passed: bool, detail: str):
    ACCEPTANCE[cid] = (bool(passed), detail)
    print(f"[acceptance] C{cid:02d} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"C{cid:02d} {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def acceptance():
    return report
