"""Shared fixtures and the acceptance-summary hook."""

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20260818)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per recorded acceptance check, capture-proof."""
    import sys

    module = next(
        (mod for name, mod in sys.modules.items() if name.rpartition(".")[2] == "test_acceptance"),
        None,
    )
    results = getattr(module, "RESULTS", [])
    if not results:
        return
    terminalreporter.section("acceptance summary")
    for num, name, ok, detail in sorted(results):
        status = "PASS" if ok else "FAIL"
        line = f"[{num}] {name}: {status}"
        if detail and not ok:
            line += f" ({detail})"
        terminalreporter.write_line(line)
