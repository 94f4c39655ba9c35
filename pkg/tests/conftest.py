"""Collects the acceptance results and prints one line per criterion at the end of the run."""
import pytest

CRITERIA = {}
_ran_acceptance = []


@pytest.fixture
def criterion(request):
    _ran_acceptance.append(True)

    def record(number: int, ok: bool, detail: str) -> bool:
        CRITERIA.setdefault(number, []).append((bool(ok), detail))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ran_acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 11):
        parts = CRITERIA.get(n)
        if not parts:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        ok = all(p[0] for p in parts)
        detail = "; ".join(("" if p[0] else "[failed] ") + p[1] for p in parts)
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
