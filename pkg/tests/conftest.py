import numpy as np
import pytest

from nlhomog.fem import ContrastField, HookeTensor
from nlhomog.geometry import CellGeometry, build_cell_mesh, build_macro_mesh

ISO = HookeTensor.isotropic(1.0, 1.0)


@pytest.fixture(scope="session")
def iso():
    return ISO


@pytest.fixture(scope="session")
def square8():
    return build_cell_mesh(CellGeometry("square", 0.25, 8))


@pytest.fixture(scope="session")
def tiny_cell():
    # res 4, halfwidth 0.2: discrete inclusion is the central 2x2 block
    return build_cell_mesh(CellGeometry("square", 0.2, 4))


@pytest.fixture(scope="session")
def tiny_macro(tiny_cell):
    """n = 2 on the res-4 cell: 81 nodes, small enough for dense oracles."""
    return build_macro_mesh(tiny_cell, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def contrast(delta, A=ISO):
    return ContrastField(A, delta)


# --- acceptance summary ------------------------------------------------------
# Acceptance tests are named ``test_cNN_...``; every phase outcome is folded
# into one PASS/FAIL line per criterion at the end of the run.

import re

CRITERIA = {
    1: "homogenized tensor structure",
    2: "dense oracle equivalence",
    3: "nonlocal solver correctness",
    4: "adjoint and gradient consistency",
    5: "optimality system residuals",
    6: "energy convergence",
    7: "strong two-scale convergence",
    8: "optimal control convergence",
    9: "kappa consistency",
    10: "uniformity of constants",
}
_OUTCOMES = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_c(\d+)_", report.nodeid)
    if not m:
        return
    k = int(m.group(1))
    ok = not report.failed and not (report.when == "call" and report.skipped)
    _OUTCOMES.setdefault(k, []).append(ok)


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for k, name in CRITERIA.items():
        got = _OUTCOMES.get(k)
        status = "PASS" if got and all(got) else "FAIL"
        note = "" if got else " (not run)"
        terminalreporter.write_line(f"{status} criterion {k:2d}: {name}{note}")
