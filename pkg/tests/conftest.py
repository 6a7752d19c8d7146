import os
from collections import OrderedDict

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA: "OrderedDict[int, list[tuple[str, bool, str]]]" = OrderedDict()


@pytest.fixture
def criterion():
    """Record one sub-check of a numbered acceptance criterion.

    ``criterion(n, part, ok, detail)`` stores the outcome and returns ``ok`` so the
    caller can assert on it; the terminal summary prints one line per criterion.
    """
    def record(n: int, part: str, ok: bool, detail: str = "") -> bool:
        _CRITERIA.setdefault(n, []).append((part, bool(ok), detail))
        print(f"criterion {n} [{part}]: {'PASS' if ok else 'FAIL'} {detail}")
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        parts = _CRITERIA[n]
        ok = all(p[1] for p in parts)
        bad = [f"{p[0]} ({p[2]})" for p in parts if not p[1]]
        tail = "" if ok else " failing: " + "; ".join(bad)
        tr.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}{tail}")
