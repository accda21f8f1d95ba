import pytest

# criterion number -> (passed, line); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k][1])
    passed = sum(ok for ok, _ in ACCEPTANCE.values())
    terminalreporter.write_line(f"{passed}/{len(ACCEPTANCE)} criteria pass")


@pytest.fixture
def record():
    """``record(k, title, ok, detail)`` stores and prints one verdict line."""
    def _record(k, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] {k:>2}. {title}: {detail}"
        ACCEPTANCE[k] = (bool(ok), line)
        print(line)
        return ok
    return _record
