import numpy as np
import pytest

from nlhomog import oracles
from nlhomog.cell import compute_hom_tensor
from nlhomog.errors import ValidationError
from nlhomog.state import PhysicsParams
from nlhomog.twoscale import (LimitProblem, dense_limit_blocks, limit_energy, limit_grid,
                              limit_problem, solve_limit_adjoint, solve_limit_ocp,
                              solve_limit_state)


def problem(cell, A, phys, kappa, m=4):
    H = compute_hom_tensor(cell, A)
    return LimitProblem(limit_grid(m), H, cell, A, phys, kappa)


def dense_tangent(pb, st):
    KK, MM, free = dense_limit_blocks(pb, 0.0)
    U = pb.state_vector(st)[free]
    a, p, s = pb.phys.alpha, pb.phys.p, st.s
    T = KK + a * s**p * MM
    if a:
        b = MM @ U
        T = T + a * p * s ** (p - 2) * np.outer(b, b)
    return T, MM, free


def unit_controls(pb):
    n = pb.nE * pb.nth
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        yield e.reshape(pb.nE, pb.nth)


@pytest.mark.parametrize("kappa", [1.0, np.inf])
def test_zero_data(iso, tiny_cell, kappa):
    pb = problem(tiny_cell, iso, PhysicsParams(f="zero"), kappa)
    st = pb.solve_state()
    assert st.s == 0.0 and not np.any(st.u0)
    assert st.W is None or not np.any(st.W)
    assert limit_energy(st) == 0.0


def test_kappa_inf_alpha_zero_dense(iso, tiny_cell):
    pb = problem(tiny_cell, iso, PhysicsParams(alpha=0.0, f="const"), np.inf)
    st = pb.solve_state()
    assert st.W is None
    K = pb.K0.to_dense()
    ref = oracles.dense_solve(oracles.DenseSystem(K, pb.M0 @ pb.f0, pb.K0.constrained))
    assert np.linalg.norm(st.u0 - ref) <= 1e-9 * np.linalg.norm(ref)


@pytest.mark.parametrize("kappa", [0.5, 1.0, 3.0])
def test_block_solve_matches_dense(iso, tiny_cell, rng, kappa):
    pb = problem(tiny_cell, iso, PhysicsParams(), kappa)
    c = 0.37
    KK, MM, free = dense_limit_blocks(pb, c)
    assert KK.shape[0] <= 200
    rhs = np.zeros(pb.n0 + pb.nE * pb.nW)
    rhs[free] = rng.standard_normal(free.sum())
    x = pb.block_solve(c, rhs)
    ref = np.linalg.solve(KK + c * MM, rhs[free])
    assert np.linalg.norm(x[free] - ref) <= 1e-9 * np.linalg.norm(ref)
    assert not np.any(x[~free])


def test_block_system_coercive(iso, tiny_cell):
    pb = problem(tiny_cell, iso, PhysicsParams(), 1.0)
    KK, MM, _ = dense_limit_blocks(pb, 0.0)
    assert np.allclose(KK, KK.T, atol=1e-13) and np.allclose(MM, MM.T, atol=1e-13)
    assert np.linalg.eigvalsh(KK)[0] > 0
    assert np.linalg.eigvalsh(MM)[0] > 0


@pytest.mark.parametrize("kappa", [1.0, np.inf])
def test_nonlinear_limit_state_residual(iso, tiny_cell, kappa):
    pb = problem(tiny_cell, iso, PhysicsParams(f="trig", p=3), kappa, m=8)
    st = pb.solve_state()
    U = pb.state_vector(st)
    c = pb.phys.alpha * st.s ** pb.phys.p
    assert pb.block_residual(c, U, pb.load(None)) <= 1e-9
    assert st.s == pytest.approx(pb.norm(U), rel=1e-10)


def test_limit_energy_minimal(iso, tiny_cell, rng):
    pb = problem(tiny_cell, iso, PhysicsParams(f="const"), 1.0)
    st = pb.solve_state()
    U = pb.state_vector(st)
    L = pb.load(None)
    e0 = pb.energy(U, L).total
    assert e0 < 0
    _, _, free = dense_limit_blocks(pb, 0.0)
    scale = np.abs(U).max()
    for _ in range(10):
        w = np.zeros_like(U)
        w[free] = rng.standard_normal(free.sum())
        assert pb.energy(U + 0.1 * scale * w, L).total > e0


def test_kappa_large_matches_infinite(iso, square8):
    phys = PhysicsParams(f="const", u_d="trig")
    grid = limit_grid(16)
    H = compute_hom_tensor(square8, iso)
    inf = solve_limit_state(grid, H, square8, iso, phys, np.inf)
    big = solve_limit_state(grid, H, square8, iso, phys, 1e6)
    pb = big.problem
    d = big.u0 - inf.u0
    assert np.sqrt(d @ pb.M0 @ d) <= 1e-4 * np.sqrt(inf.u0 @ pb.M0 @ inf.u0)
    Wk = big.W / 1e6
    assert np.sqrt(pb.area * np.einsum("ei,ij,ej->", Wk, pb.MY, Wk)) <= 1e-4


def test_adjoint_zero_at_target(iso, tiny_cell):
    st0 = problem(tiny_cell, iso, PhysicsParams(), np.inf).solve_state()
    U = st0.u0.reshape(-1, 2)
    pb = problem(tiny_cell, iso, PhysicsParams(u_d=lambda x: U), np.inf)
    adj = pb.solve_adjoint(pb.solve_state())
    assert np.abs(adj.v0).max() <= 1e-14


def test_adjoint_kappa_inf_alpha_zero_dense(iso, tiny_cell):
    pb = problem(tiny_cell, iso, PhysicsParams(alpha=0.0, u_d="trig"), np.inf)
    st = pb.solve_state()
    v = solve_limit_adjoint(st).v0
    ref = oracles.dense_solve(oracles.DenseSystem(pb.K0.to_dense(), pb.M0 @ (st.u0 - pb.ud0),
                                                  pb.K0.constrained))
    assert np.linalg.norm(v - ref) <= 1e-9 * np.linalg.norm(ref)


@pytest.mark.parametrize("kappa,alpha,p", [(1.0, 1.0, 2), (2.0, 1.0, 3), (np.inf, 1.0, 2),
                                           (1.0, 0.0, 2)])
def test_limit_duality_identity(iso, tiny_cell, rng, kappa, alpha, p):
    pb = problem(tiny_cell, iso, PhysicsParams(alpha=alpha, p=p, f="trig", u_d="const"), kappa)
    theta = rng.standard_normal((pb.nE, pb.nth))
    st = pb.solve_state(theta)
    adj = pb.solve_adjoint(st)
    T, MM, free = dense_tangent(pb, st)
    # u_d need not vanish on Gamma0, so keep the full mass product
    Md = pb.mass(pb.state_vector(st) - pb.target_vector())[free]
    g = pb.gradient(np.zeros_like(theta), adj)
    L0 = pb.load(None)
    for _ in range(3):
        h = rng.standard_normal(theta.shape)
        udot = np.linalg.solve(T, (pb.load(h) - L0)[free])
        lhs = Md @ udot
        rhs = pb.control_inner(h, g)
        assert abs(lhs - rhs) <= 1e-8 * abs(lhs)


def test_limit_gradient_fd(iso, tiny_cell, rng):
    pb = problem(tiny_cell, iso, PhysicsParams(f="trig", u_d="const"), 1.0)
    theta = rng.standard_normal((pb.nE, pb.nth))
    st = pb.solve_state(theta)
    g = pb.gradient(theta, pb.solve_adjoint(st))
    cost = lambda t: pb.cost(pb.solve_state(t), t)
    hs = [rng.standard_normal(theta.shape) for _ in range(5)]
    fd = oracles.fd_gradient(cost, theta, hs, 1e-5)
    for h, f in zip(hs, fd):
        assert abs(f - pb.control_inner(g, h)) <= 1e-4 * abs(f)


def test_limit_ocp_reachable_target(iso, tiny_cell):
    grid = limit_grid(4)
    H = compute_hom_tensor(tiny_cell, iso)
    U = solve_limit_state(grid, H, tiny_cell, iso, PhysicsParams(), np.inf).u0.reshape(-1, 2)
    res = solve_limit_ocp(grid, H, tiny_cell, iso, PhysicsParams(u_d=lambda x: U), np.inf)
    assert not np.any(res.Theta) and res.cost == 0.0


def test_limit_ocp_inf_constant_in_y(iso, square8):
    grid = limit_grid(8)
    H = compute_hom_tensor(square8, iso)
    res = solve_limit_ocp(grid, H, square8, iso, PhysicsParams(u_d="trig"), np.inf)
    T = res.Theta.reshape(grid.n_elements, -1, 2)
    assert T.var(axis=1).max() <= 1e-10
    assert np.abs(T).max() > 1e-3


def test_limit_ocp_alpha_zero_lq(iso, tiny_cell):
    phys = PhysicsParams(alpha=0.0, u_d="trig")
    grid = limit_grid(2)
    H = compute_hom_tensor(tiny_cell, iso)
    pb = limit_problem(grid, H, tiny_cell, iso, phys, np.inf)
    u0 = pb.solve_state().u0
    S = np.column_stack([pb.solve_state(e).u0 - u0 for e in unit_controls(pb)])
    M1 = np.kron(np.eye(pb.nE), pb.area * pb.Mth)
    ref = oracles.lq_ocp_oracle(S, u0, pb.ud0, phys.gamma, pb.M0.toarray(), M1)
    res = solve_limit_ocp(grid, H, tiny_cell, iso, phys, np.inf)
    assert np.abs(res.Theta.ravel() - ref).max() <= 1e-6 * np.abs(ref).max()


def test_limit_problem_validation(iso, tiny_cell):
    with pytest.raises(ValidationError):
        problem(tiny_cell, iso, PhysicsParams(), -1.0)
    pb = problem(tiny_cell, iso, PhysicsParams(), 1.0)
    with pytest.raises(ValidationError):
        pb.solve_state(np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        LimitProblem(tiny_cell, compute_hom_tensor(tiny_cell, iso), tiny_cell, iso,
                     PhysicsParams(), 1.0)
