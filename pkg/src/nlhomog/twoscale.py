"""Two-scale limit problem: macro displacement ``u0`` coupled to an inclusion field.

Discretization.  ``u0`` is bilinear on an ``m x m`` macro grid.  The
inclusion field ``W`` is constant in ``x`` on each macro element ``E`` and
bilinear in ``y`` on the nodes interior to ``Y1`` (it vanishes on ``Y2``).
Controls are constant in ``x`` on each macro element and bilinear in ``y`` on
all nodes of ``Y1`` elements.  The limit field is ``u0 + W / kappa``.

With ``U = (u0, W)`` the limit system for a fixed amplitude ``s`` reads
``(KK + alpha s^p MM) U = L`` where

    KK = diag(K_hom, |E| K_Y)
    MM = [[M0, P^T (I x q) / kappa], [(I x q^T) P / kappa, |E| M_Y / kappa^2]]

``P`` integrates ``u0`` over each macro element and ``q`` integrates cell
fields over ``Y``.  The cell blocks are eliminated element by element, which
leaves one sparse SPD macro system per amplitude.  For ``kappa = inf`` the
inclusion field is identically zero and only the macro block remains.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve

from .cell import HomogenizedTensor
from .errors import ValidationError
from .fem import SparseOperator, assemble, solve_spd
from .geometry import INCLUSION, QuadGrid, build_grid
from .ocp import descend
from .state import EnergyReport, RootResult, nonlocal_root


def _is_inf(kappa):
    return kappa is None or not np.isfinite(kappa)


@dataclass(frozen=True, eq=False)
class TwoScaleState:
    u0: np.ndarray
    W: np.ndarray | None
    s: float
    energy: EnergyReport
    kappa: float
    iterations: int
    problem: "LimitProblem" = field(repr=False, default=None)

    @property
    def cell_blocks_assembled(self):
        return self.W is not None


@dataclass(frozen=True, eq=False)
class TwoScaleAdjoint:
    v0: np.ndarray
    Z: np.ndarray | None


class LimitProblem:
    """Assembled two-scale operators for one macro grid, cell, tensor pair and kappa."""

    def __init__(self, grid, Ahom, cell, A, phys, kappa):
        if not isinstance(grid, QuadGrid):
            raise ValidationError("limit problem needs a macro grid")
        if isinstance(Ahom, HomogenizedTensor):
            Ahom = Ahom.tensor
        self.grid, self.cell, self.A, self.phys = grid, cell, A, phys
        self.kappa = float("inf") if _is_inf(kappa) else float(kappa)
        if self.kappa <= 0:
            raise ValidationError("kappa must be positive")
        self.finite = np.isfinite(self.kappa)
        self.K0 = assemble(grid, Ahom, "stiffness")
        self.M0 = assemble(grid, None, "mass").matrix
        self.nE = grid.n_elements
        self.area = grid.h**2
        self.n0 = 2 * grid.n_nodes
        self.f0 = phys.body_force(grid.nodes)
        self.ud0 = phys.target(grid.nodes)

        # P[(E, c), (node, c)] = int_E phi_node dx
        rows = np.repeat(np.arange(self.nE), 4)
        nodes = grid.elements.ravel()
        w = np.full(rows.size, self.area / 4)
        Px = sp.csr_matrix((w, (2 * rows, 2 * nodes)), shape=(2 * self.nE, self.n0))
        Py = sp.csr_matrix((w, (2 * rows + 1, 2 * nodes + 1)), shape=(2 * self.nE, self.n0))
        self.P = (Px + Py).tocsr()

        # cell-level blocks
        Kc = assemble(cell, A, "stiffness", tag=INCLUSION, constrained=[]).matrix
        Mc = assemble(cell, None, "mass_on_region", tag=INCLUSION, constrained=[]).matrix
        tn = cell.y1_nodes
        wn = cell.y1_interior_nodes
        self.theta_dofs = np.column_stack([2 * tn, 2 * tn + 1]).ravel()
        self.w_dofs = np.column_stack([2 * wn, 2 * wn + 1]).ravel()
        self.w_in_theta = np.searchsorted(self.theta_dofs, self.w_dofs)
        td, wd = self.theta_dofs, self.w_dofs
        self.KY = Kc[wd][:, wd].toarray()
        self.MY = Mc[wd][:, wd].toarray()
        self.Mth = Mc[td][:, td].toarray()
        self.Mth_W = Mc[td][:, wd].toarray()
        self.nW, self.nth = len(wd), len(td)
        comp = np.zeros((2 * cell.n_nodes, 2))
        comp[0::2, 0] = 1.0
        comp[1::2, 1] = 1.0
        # q[c, a] = int_Y phi_a e_c dy for W unknowns, q1 the same over theta unknowns
        self.q = (Mc[wd] @ comp).T
        self.q1 = (Mc[td] @ comp).T
        self._schur = {}
        self._cells = {}

    # --- vector layout -----------------------------------------------------
    def split(self, U):
        if not self.finite:
            return U, None
        return U[: self.n0], U[self.n0:].reshape(self.nE, self.nW)

    def join(self, u0, W):
        if not self.finite:
            return u0
        return np.concatenate([u0, W.ravel()])

    def zero_control(self):
        return np.zeros((self.nE, self.nth))

    def elem_means(self, u0):
        return (self.P @ u0).reshape(self.nE, 2)

    # --- operators ---------------------------------------------------------
    def mass(self, U):
        u0, W = self.split(U)
        out0 = self.M0 @ u0
        if not self.finite:
            return out0
        k = self.kappa
        out0 = out0 + self.P.T @ (W @ self.q.T).ravel() / k
        outW = (self.elem_means(u0) @ self.q) / k + (self.area / k**2) * (W @ self.MY)
        return self.join(out0, outW)

    def stiffness(self, U):
        u0, W = self.split(U)
        out0 = self.K0.matrix @ u0
        if not self.finite:
            return out0
        return self.join(out0, self.area * (W @ self.KY))

    def _cell_factor(self, c):
        key = round(float(c), 14)
        if key not in self._cells:
            if len(self._cells) >= 8:
                self._cells.pop(next(iter(self._cells)))
            C = self.area * (self.KY + (c / self.kappa**2) * self.MY)
            self._cells[key] = cho_factor(C) if self.nW else None
        return self._cells[key]

    def _schur_op(self, c):
        key = round(float(c), 14)
        if key not in self._schur:
            S = self.K0.matrix + c * self.M0
            if self.finite and self.nW and c != 0:
                cf = self._cell_factor(c)
                G = self.q @ cho_solve(cf, self.q.T)
                G = sp.kron(sp.identity(self.nE), G)
                S = S - (c / self.kappa) ** 2 * (self.P.T @ G @ self.P)
            self._schur = {key: SparseOperator(S, self.K0.constrained)}
        return self._schur[key]

    def block_solve(self, c, rhs):
        """Solve ``(KK + c MM) U = rhs`` by eliminating the cell blocks."""
        r0, R = self.split(rhs)
        op = self._schur_op(c)
        if not self.finite:
            return solve_spd(op, r0, tol=self.phys.tol_lin)
        if self.nW == 0:
            return self.join(solve_spd(op, r0, tol=self.phys.tol_lin), R * 0.0)
        cf = self._cell_factor(c)
        X = cho_solve(cf, R.T).T
        k = self.kappa
        rhs0 = r0 - (c / k) * (self.P.T @ (X @ self.q.T).ravel())
        u0 = solve_spd(op, rhs0, tol=self.phys.tol_lin)
        W = cho_solve(cf, (R - (c / k) * (self.elem_means(u0) @ self.q)).T).T
        return self.join(u0, W)

    def block_residual(self, c, U, rhs, rank_one=None):
        r = self.stiffness(U) + c * self.mass(U) - rhs
        if rank_one is not None:
            b, cc = rank_one
            r = r + cc * (b @ U) * b
        free = np.ones(len(r), dtype=bool)
        free[self.K0.constrained] = False
        res, scale = np.linalg.norm(r[free]), np.linalg.norm(rhs[free])
        return float(res / scale) if scale > 0 else float(res)

    # --- state -------------------------------------------------------------
    def load(self, theta):
        r0 = self.M0 @ self.f0
        if theta is not None:
            r0 = r0 + self.P.T @ (theta @ self.q1.T).ravel()
        if not self.finite:
            return r0
        R = (self.elem_means(self.f0) @ self.q) / self.kappa
        if theta is not None:
            R = R + (self.area / self.kappa) * (theta @ self.Mth_W)
        return self.join(r0, R)

    def norm(self, U):
        return float(np.sqrt(max(U @ self.mass(U), 0.0)))

    def energy(self, U, L):
        s = self.norm(U)
        a = self.phys.alpha
        return EnergyReport(0.5 * float(U @ self.stiffness(U)),
                            a / (self.phys.p + 2) * s ** (self.phys.p + 2), float(L @ U))

    def solve_state(self, theta=None, s_guess=None):
        if theta is not None:
            theta = self.check_control(theta)
        L = self.load(theta)

        def solve(c):
            return self.block_solve(c, L), (lambda r: self.block_solve(c, r))

        root: RootResult = nonlocal_root(solve, self.mass, self.phys.alpha, self.phys.p,
                                         self.phys.tol_fp, s_guess)
        u0, W = self.split(root.u)
        return TwoScaleState(u0, W, root.s, self.energy(root.u, L), self.kappa,
                             root.iterations, self)

    def state_vector(self, st):
        return self.join(st.u0, st.W)

    def check_control(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.nE, self.nth):
            raise ValidationError(f"limit control must have shape {(self.nE, self.nth)}")
        return theta

    # --- adjoint and cost --------------------------------------------------
    def target_vector(self):
        if not self.finite:
            return self.ud0
        return self.join(self.ud0, np.zeros((self.nE, self.nW)))

    def solve_adjoint(self, st):
        U = self.state_vector(st)
        s = st.s
        a, p = self.phys.alpha, self.phys.p
        c = a * s**p
        rhs = self.mass(U - self.target_vector())
        b = self.mass(U)
        cc = a * p * s ** (p - 2) if a else 0.0
        x = self.block_solve(c, rhs)
        if cc:
            y = self.block_solve(c, b)
            x = x - (cc * (b @ x) / (1.0 + cc * (b @ y))) * y
        v0, Z = self.split(x)
        return TwoScaleAdjoint(v0, Z)

    def control_inner(self, a, b):
        return self.area * float(np.sum((a @ self.Mth) * b))

    def cost(self, st, theta):
        d = self.state_vector(st) - self.target_vector()
        track = 0.5 * float(d @ self.mass(d))
        return track + 0.5 * self.phys.gamma * self.control_inner(theta, theta)

    def gradient(self, theta, adj):
        """L2(Omega x Y1) gradient ``gamma theta + v0 + Z / kappa`` in the control space."""
        g = self.phys.gamma * theta
        means = self.elem_means(adj.v0) / self.area
        g = g + np.tile(means, (1, self.nth // 2))
        if self.finite and adj.Z is not None:
            g[:, self.w_in_theta] += adj.Z / self.kappa
        return g


def limit_problem(grid, Ahom, cell, A, phys, kappa):
    """``LimitProblem`` cached on the grid for repeated calls with the same inputs."""
    cache = grid.__dict__.setdefault("_limit_cache", {})
    At = Ahom.tensor if isinstance(Ahom, HomogenizedTensor) else Ahom
    key = (At.voigt.tobytes(), id(cell), A.voigt.tobytes(), phys, float(kappa))
    if key not in cache:
        cache[key] = LimitProblem(grid, Ahom, cell, A, phys, kappa)
    return cache[key]


def solve_limit_state(macro_mesh, Ahom, cell, A, phys, kappa, theta_hat=None):
    """Limit state ``(u0, W)``; ``W`` is ``None`` for ``kappa = inf``."""
    return limit_problem(macro_mesh, Ahom, cell, A, phys, kappa).solve_state(theta_hat)


def limit_energy(state, phys=None, theta_hat=None):
    """Limit total energy of a solved state or of ``state`` re-evaluated with new data."""
    pb = state.problem
    U = pb.state_vector(state)
    return pb.energy(U, pb.load(theta_hat)).total


def solve_limit_adjoint(state, macro_mesh=None, Ahom=None, cell=None, A=None, phys=None):
    return state.problem.solve_adjoint(state)


@dataclass(frozen=True, eq=False)
class LimitOcpResult:
    Theta: np.ndarray
    state: TwoScaleState
    adjoint: TwoScaleAdjoint
    cost: float
    cost_history: list
    grad_history: list
    optimality_residual: float
    iterations: int


@dataclass(frozen=True, eq=False)
class _Eval:
    x: np.ndarray
    cost: float
    grad: np.ndarray
    state: TwoScaleState
    adjoint: TwoScaleAdjoint


def solve_limit_ocp(macro_mesh, Ahom, cell, A, phys, kappa, theta0=None, *, tol=None,
                    max_iter=500):
    """Stationary limit control by the same descent as the microscopic problem."""
    pb = limit_problem(macro_mesh, Ahom, cell, A, phys, kappa)
    theta0 = pb.zero_control() if theta0 is None else pb.check_control(theta0)
    ud = pb.target_vector()
    if tol is None:
        tol = 1e-8 * (1.0 + float(np.sqrt(max(pb.ud0 @ (pb.M0 @ pb.ud0), 0.0))))
    cache = {"s": None}

    def evaluate(theta):
        st = pb.solve_state(theta, s_guess=cache["s"])
        cache["s"] = st.s
        adj = pb.solve_adjoint(st)
        return _Eval(theta, pb.cost(st, theta), pb.gradient(theta, adj), st, adj)

    def difference(new, old):
        U1, U0 = pb.state_vector(new.state), pb.state_vector(old.state)
        return (0.5 * float((U1 - U0) @ pb.mass(U1 + U0 - 2 * ud))
                + 0.5 * phys.gamma * pb.control_inner(new.x - old.x, new.x + old.x))

    d = descend(evaluate, pb.control_inner, difference, theta0, tol, phys.gamma,
                max_iter=max_iter)
    ev = d.best
    gn = float(np.sqrt(pb.control_inner(ev.grad, ev.grad)))
    return LimitOcpResult(ev.x, ev.state, ev.adjoint, ev.cost, d.cost_history,
                          d.grad_history, gn, d.iterations)


def limit_grid(m, gamma0=("left",)):
    return build_grid(m, gamma0)


def dense_limit_blocks(pb, c):
    """Dense ``KK`` and ``MM`` on the free unknowns, for small test problems."""
    n = pb.n0 + (pb.nE * pb.nW if pb.finite else 0)
    I = np.eye(n)
    KK = np.column_stack([pb.stiffness(I[:, j]) for j in range(n)])
    MM = np.column_stack([pb.mass(I[:, j]) for j in range(n)])
    free = np.ones(n, dtype=bool)
    free[pb.K0.constrained] = False
    return KK[np.ix_(free, free)], MM[np.ix_(free, free)], free
