"""Dense brute-force references used only by the test suite.

Nothing in the solver modules imports this file.  Every routine works on
explicit dense matrices and refuses systems larger than ``MAX_DOFS``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OracleError

MAX_DOFS = 400


@dataclass
class DenseSystem:
    matrix: np.ndarray
    rhs: np.ndarray
    constrained: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.rhs = np.asarray(self.rhs, dtype=float)
        n = self.matrix.shape[0]
        if n > MAX_DOFS:
            raise OracleError(f"dense oracle limited to {MAX_DOFS} DOFs, got {n}")
        if self.matrix.shape != (n, n) or self.rhs.shape[0] != n:
            raise OracleError("matrix and right-hand side sizes differ")

    @property
    def free(self):
        mask = np.ones(self.matrix.shape[0], dtype=bool)
        mask[np.asarray(self.constrained, dtype=int)] = False
        return np.flatnonzero(mask)


def dense_solve(sys_):
    """Cholesky solve on the free DOFs; constrained DOFs are zero."""
    if not isinstance(sys_, DenseSystem):
        raise OracleError("dense_solve expects a DenseSystem")
    f = sys_.free
    A = sys_.matrix[np.ix_(f, f)]
    A = 0.5 * (A + A.T)
    eig = np.linalg.eigvalsh(A)
    tol = 1e-12 * max(1.0, abs(eig).max())
    if eig[0] <= tol:
        k = int(np.sum(eig <= tol))
        raise OracleError(
            f"matrix is not positive definite: {k}-dimensional kernel "
            f"(rigid-motion kernel if no displacement constraints are applied)")
    L = np.linalg.cholesky(A)
    x = np.zeros_like(sys_.rhs)
    x[f] = np.linalg.solve(L.T, np.linalg.solve(L, sys_.rhs[f]))
    return x


def fd_gradient(cost, theta, h_list, tau=1e-5):
    """Central differences ``(j(theta + tau h) - j(theta - tau h)) / (2 tau)``."""
    if not 1e-7 <= tau <= 1e-3:
        raise OracleError(f"tau must lie in [1e-7, 1e-3], got {tau}")
    return np.array([(cost(theta + tau * h) - cost(theta - tau * h)) / (2 * tau) for h in h_list])


def lq_ocp_oracle(S, u0, u_d, gamma, M=None, M1=None):
    """Minimizer of ``1/2 |S th + u0 - u_d|_M^2 + gamma/2 |th|_{M1}^2``.

    With identity weights this is ``(gamma I + S^T S) th = S^T (u_d - u0)``.
    """
    S = np.asarray(S, dtype=float)
    n_u, n_t = S.shape
    if max(n_u, n_t) > MAX_DOFS:
        raise OracleError("LQ oracle limited to small problems")
    M = np.eye(n_u) if M is None else np.asarray(M, dtype=float)
    M1 = np.eye(n_t) if M1 is None else np.asarray(M1, dtype=float)
    H = gamma * M1 + S.T @ M @ S
    return np.linalg.solve(H, S.T @ M @ (np.asarray(u_d) - np.asarray(u0)))


def cubic_root(k, m, alpha, F):
    """Real root of the 1-DOF surrogate ``k u + alpha (m u^2) m u = F`` (p = 2)."""
    roots = np.roots([alpha * m**2, 0.0, k, -F]) if alpha else np.array([F / k])
    real = roots[np.abs(roots.imag) < 1e-9].real
    if real.size != 1:
        raise OracleError("surrogate cubic does not have a unique real root")
    return float(real[0])


def dense_operators(mesh, contrast):
    """Dense stiffness, mass and inclusion mass of a small macro mesh, with the free DOFs."""
    from .fem import macro_operators

    ops = macro_operators(mesh, contrast.A)
    K = ops.stiffness(contrast.delta)
    if K.shape[0] > MAX_DOFS:
        raise OracleError(f"mesh too large for dense oracles ({K.shape[0]} DOFs)")
    return K.to_dense(), ops.M.to_dense(), ops.M_incl.to_dense(), K.free


def dense_state_map(mesh, contrast, f_nodal):
    """For alpha = 0: ``u(theta) = u0 + S theta_c`` over the free inclusion DOFs ``theta_c``."""
    K, M, M1, free = dense_operators(mesh, contrast)
    ctrl = np.intersect1d(mesh.inclusion_dofs, free)
    Kf = K[np.ix_(free, free)]
    S = np.zeros((K.shape[0], len(ctrl)))
    S[free] = np.linalg.solve(Kf, M1[np.ix_(free, ctrl)])
    u0 = np.zeros(K.shape[0])
    u0[free] = np.linalg.solve(Kf, (M @ f_nodal)[free])
    return S, u0, ctrl, M, M1


def dense_tangent(mesh, contrast, phys, u):
    """``K + alpha s^p M + alpha p s^(p-2) (M u)(M u)^T`` as a dense matrix."""
    K, M, _, free = dense_operators(mesh, contrast)
    s = float(np.sqrt(u @ M @ u))
    Mu = M @ u
    c = phys.alpha * phys.p * s ** (phys.p - 2) if phys.alpha else 0.0
    return K + phys.alpha * s**phys.p * M + c * np.outer(Mu, Mu), free


def linearized_state(mesh, contrast, phys, u, h):
    """Derivative of the control-to-state map at the state ``u`` in direction ``h``."""
    T, free = dense_tangent(mesh, contrast, phys, u)
    _, _, M1, _ = dense_operators(mesh, contrast)
    out = np.zeros_like(u)
    out[free] = np.linalg.solve(T[np.ix_(free, free)], (M1 @ h)[free])
    return out


def dense_adjoint(mesh, contrast, phys, u, u_d):
    T, free = dense_tangent(mesh, contrast, phys, u)
    _, M, _, _ = dense_operators(mesh, contrast)
    out = np.zeros_like(u)
    out[free] = np.linalg.solve(T[np.ix_(free, free)], (M @ (u - u_d))[free])
    return out
