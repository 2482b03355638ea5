import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import eigh

from nlhomog import oracles
from nlhomog.errors import SolverError, ValidationError
from nlhomog.fem import macro_operators
from nlhomog.geometry import CellGeometry, build_cell_mesh, build_macro_mesh
from nlhomog.harness import smooth_controls
from nlhomog.state import (PhysicsParams, _shifted_solver, control_to_state_lipschitz_probe,
                           nonlocal_root, solve_state, state_residual, total_energy)

from conftest import contrast


def scalar_problem(k, m, F):
    mass = lambda v: m * v

    def solve(c):
        op = lambda r: r / (k + c * m)
        return op(np.atleast_1d(F).astype(float)), op
    return solve, mass


def test_cubic_surrogate():
    solve, mass = scalar_problem(1.0, 1.0, 2.0)
    root = nonlocal_root(solve, mass, alpha=1.0, p=2)
    assert abs(root.u[0] - 1.0) <= 1e-10
    assert root.s == pytest.approx(1.0, abs=1e-10)
    assert oracles.cubic_root(1.0, 1.0, 1.0, 2.0) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.1, 3), st.floats(-20, 20), st.floats(0.01, 5))
def test_surrogate_matches_closed_form(k, m, F, alpha):
    solve, mass = scalar_problem(k, m, F)
    root = nonlocal_root(solve, mass, alpha, 2)
    ref = oracles.cubic_root(k, m, alpha, F)
    assert root.u[0] == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_nonlocal_root_reports_failure():
    solve, mass = scalar_problem(1.0, 1.0, 3.0)
    with pytest.raises(SolverError) as info:
        nonlocal_root(solve, mass, 1.0, 2, tol_fp=1e-10, max_iter=1)
    assert info.value.trajectory


def test_zero_data_gives_zero(tiny_macro, iso):
    phys = PhysicsParams(f="zero")
    st_ = solve_state(tiny_macro, contrast(0.5), phys)
    assert not np.any(st_.u) and st_.s_star == 0.0
    assert st_.energy.total == 0.0


def test_alpha_zero_matches_dense(iso):
    cell = build_cell_mesh(CellGeometry("none", 0.0, 2))
    mesh = build_macro_mesh(cell, 1)
    phys = PhysicsParams(alpha=0.0, f="const:1,0")
    u = solve_state(mesh, contrast(1.0), phys).u
    K, M, _, free = oracles.dense_operators(mesh, contrast(1.0))
    ref = oracles.dense_solve(oracles.DenseSystem(K, M @ phys.body_force(mesh.nodes),
                                                  np.setdiff1d(np.arange(len(u)), free)))
    assert np.linalg.norm(u - ref) <= 1e-9 * np.linalg.norm(ref)


def test_state_residual_and_energy_sign(tiny_macro):
    phys = PhysicsParams(f="trig")
    st_ = solve_state(tiny_macro, contrast(0.3), phys)
    assert state_residual(st_.u, tiny_macro, contrast(0.3), phys) <= 1e-9
    assert st_.energy.total <= 0
    ops = macro_operators(tiny_macro, contrast(0.3).A)
    assert st_.s_star == pytest.approx(ops.l2(st_.u), rel=1e-10)


def test_solution_minimizes_energy(tiny_macro, rng):
    phys = PhysicsParams(f="const", alpha=2.0, p=3)
    c = contrast(0.4)
    st_ = solve_state(tiny_macro, c, phys)
    e0 = total_energy(st_.u, tiny_macro, c, phys).total
    free = macro_operators(tiny_macro, c.A).stiffness(c.delta).free
    scale = np.abs(st_.u).max()
    for _ in range(10):
        w = np.zeros_like(st_.u)
        w[free] = rng.standard_normal(len(free))
        assert total_energy(st_.u + 0.1 * scale * w, tiny_macro, c, phys).total > e0


def test_amplitude_map_nonincreasing(rng):
    """``s -> ||u(s)||`` on a 20-point grid for 5 random problems."""
    cell = build_cell_mesh(CellGeometry("square", 0.2, 4))
    mesh = build_macro_mesh(cell, 2)
    for _ in range(5):
        A = contrast(rng.uniform(0.1, 1.0))
        ops = macro_operators(mesh, A.A)
        K = ops.stiffness(A.delta)
        F = ops.M @ rng.standard_normal(2 * mesh.n_nodes)
        solve = _shifted_solver(K, ops.M.matrix, F, 1e-12, "direct")
        s_grid = np.linspace(0, 3, 20)
        norms = [ops.l2(solve(s**2)[0]) for s in s_grid]
        assert np.all(np.diff(norms) <= 1e-14 * norms[0])


def test_direct_and_cg_paths_agree(tiny_macro):
    phys = PhysicsParams(f="trig")
    a = solve_state(tiny_macro, contrast(0.3), phys)
    b = solve_state(tiny_macro, contrast(0.3), phys, method="cg")
    assert np.linalg.norm(a.u - b.u) <= 1e-8 * np.linalg.norm(a.u)


def test_control_support_checked(tiny_macro):
    theta = np.ones(2 * tiny_macro.n_nodes)
    with pytest.raises(ValidationError):
        solve_state(tiny_macro, contrast(0.5), PhysicsParams(), theta)
    with pytest.raises(ValidationError):
        solve_state(tiny_macro, contrast(0.5), PhysicsParams(), np.zeros(3))


def test_physics_validation():
    with pytest.raises(ValidationError):
        PhysicsParams(p=1.5)
    with pytest.raises(ValidationError):
        PhysicsParams(alpha=-1)
    with pytest.raises(ValidationError):
        PhysicsParams(gamma=0)


def test_lipschitz_equal_controls_rejected(tiny_macro):
    th = np.zeros(2 * tiny_macro.n_nodes)
    with pytest.raises(ValidationError):
        control_to_state_lipschitz_probe(tiny_macro, contrast(0.5), PhysicsParams(), th, th)


def test_lipschitz_alpha_zero_is_operator_norm(tiny_macro, rng):
    c = contrast(0.5)
    phys = PhysicsParams(alpha=0.0)
    S, _, ctrl, M, M1 = oracles.dense_state_map(tiny_macro, c, phys.body_force(tiny_macro.nodes))
    M1c = M1[np.ix_(ctrl, ctrl)]
    w, V = eigh(S.T @ M @ S, M1c)
    top = np.sqrt(w[-1])
    for _ in range(5):
        t1, t2 = np.zeros((2, 2 * tiny_macro.n_nodes))
        t1[ctrl] = rng.standard_normal(len(ctrl))
        r = control_to_state_lipschitz_probe(tiny_macro, c, phys, t1, t2)
        assert r <= top * (1 + 1e-9)
    t1 = np.zeros(2 * tiny_macro.n_nodes)
    t1[ctrl] = V[:, -1]
    r = control_to_state_lipschitz_probe(tiny_macro, c, phys, t1, np.zeros_like(t1))
    assert r == pytest.approx(top, rel=1e-9)


def test_lipschitz_uniform_over_sweep():
    cell = build_cell_mesh(CellGeometry("square", 0.2, 4))
    phys = PhysicsParams()
    maxima = []
    for n in (4, 8):
        mesh = build_macro_mesh(cell, n)
        for delta in (1 / n, n ** -0.5):
            rng = np.random.default_rng(5)
            ths = smooth_controls(mesh, 40, rng)
            maxima.append(max(control_to_state_lipschitz_probe(mesh, contrast(delta), phys,
                                                               ths[2 * i], ths[2 * i + 1])
                              for i in range(20)))
    assert max(maxima) / min(maxima) < 2.0
