"""Shared fixtures: kernel tables are expensive, so they are session-scoped.

The acceptance module records one line per criterion on the pytest config;
the terminal-summary hook below prints them as a block at the end of the run
so the pass/fail verdicts are visible even when individual tests xfail.
"""

import numpy as np
import pytest

from avgflow import TimeGrid, build_kernel_table, build_theta_ensemble


def pytest_configure(config):
    config._criterion_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criterion_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ou2d_table():
    """ou2d on a 200-step grid: the desk-scale workhorse."""
    return build_kernel_table(build_theta_ensemble("ou2d", 64), TimeGrid(1.0, 200))


@pytest.fixture(scope="session")
def ou2d_fine():
    """ou2d at dt = 1e-3, the resolution the tight tolerances assume."""
    return build_kernel_table(build_theta_ensemble("ou2d", 64), TimeGrid(1.0, 1000))


@pytest.fixture(scope="session")
def anti_fine():
    return build_kernel_table(
        build_theta_ensemble("antidamped2d", 64), TimeGrid(1.0, 1000)
    )


@pytest.fixture(scope="session")
def const_table():
    """A = 0, B = I in the plane: every kernel quantity has a closed form."""
    ens = build_theta_ensemble("constant", 8, a=np.zeros((2, 2)), b=np.eye(2))
    return build_kernel_table(ens, TimeGrid(1.0, 100))


@pytest.fixture(scope="session")
def scalar_table():
    """Scalar integrator at dt = 1e-3; its bridge is the classical one."""
    ens = build_theta_ensemble("constant", 8, a=[[0.0]], b=[[1.0]])
    return build_kernel_table(ens, TimeGrid(1.0, 1000))
