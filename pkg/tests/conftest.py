from __future__ import annotations

import numpy as np
import pytest

from handrecon.synth import RigSpec, generate_rig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def rig4():
    return generate_rig(RigSpec(n_cameras=4))


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def record(request):
    """Print and keep one pass/fail line per acceptance criterion."""

    def _record(number, ok, detail):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        request.config.acceptance_lines.append(line)
        return ok

    return _record
