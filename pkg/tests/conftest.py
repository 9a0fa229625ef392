import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import helpers

    if not helpers.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(helpers.ACCEPTANCE):
        parts = helpers.ACCEPTANCE[num]
        ok = all(p[0] for p in parts)
        detail = "; ".join(p[2] for p in parts if p[2])
        terminalreporter.write_line(f"criterion {num:>2}: {'PASS' if ok else 'FAIL'}  {parts[0][1]}  {detail}")
