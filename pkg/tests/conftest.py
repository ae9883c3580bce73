import pytest

# (criterion id, description, passed, detail), filled by test_acceptance.py
ACCEPTANCE_RESULTS = []


@pytest.fixture
def record_criterion():
    def record(cid, description, passed, detail=""):
        ACCEPTANCE_RESULTS.append((cid, description, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, desc, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        line = f"[{'PASS' if passed else 'FAIL'}] {cid}. {desc}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
