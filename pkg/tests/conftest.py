import re

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured values."""
    results = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if not m or (rep.when != "call" and rep.passed):
                continue
            n = int(m.group(1))
            detail = dict(rep.user_properties).get("detail", "")
            ok = rep.passed and n not in {k for k, v in results.items() if not v[1]}
            results[n] = (m.group(2).replace("_", " "), ok, detail)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(results):
        title, ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
