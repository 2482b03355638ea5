"""Semilinear state equation with the nonlocal term ``alpha ||u||^p u``.

For a fixed amplitude ``s`` the state system is linear,
``(K + alpha s^p M) u(s) = F``, and ``s -> ||u(s)||`` is nonincreasing.  The
nonlinear problem therefore reduces to the scalar root of
``phi(s) = ||u(s)|| - s`` on ``[0, ||u(0)||]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import SolverError, ValidationError
from .fem import ContrastField, SparseOperator, macro_operators, solve_spd
from .geometry import INCLUSION, MATRIX
from .presets import interpolate, parse_field

TOL_FP = 1e-10
TOL_LIN = 1e-10


@dataclass(frozen=True)
class PhysicsParams:
    """Model data: nonlocal strength and exponent, body force, target state, control cost."""

    alpha: float = 1.0
    p: float = 2.0
    f: Callable | str = "const"
    u_d: Callable | str = "zero"
    gamma: float = 1e-2
    tol_fp: float = TOL_FP
    tol_lin: float = TOL_LIN

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError(f"alpha must be nonnegative, got {self.alpha}")
        if self.p < 2:
            raise ValidationError(f"p must be at least 2, got {self.p}")
        if self.gamma <= 0:
            raise ValidationError(f"gamma must be positive, got {self.gamma}")

    def body_force(self, nodes):
        return interpolate(parse_field(self.f), nodes)

    def target(self, nodes):
        return interpolate(parse_field(self.u_d), nodes)


@dataclass(frozen=True)
class EnergyReport:
    elastic: float
    nonlocal_: float
    load: float

    @property
    def total(self):
        return self.elastic + self.nonlocal_ - self.load

    def as_dict(self):
        return {"elastic": self.elastic, "nonlocal": self.nonlocal_,
                "load": self.load, "total": self.total}


@dataclass(frozen=True)
class RootResult:
    s: float
    u: np.ndarray
    iterations: int
    trajectory: list
    resolve: Callable | None = None


@dataclass(frozen=True, eq=False)
class StateSolution:
    u: np.ndarray
    s_star: float
    energy: EnergyReport
    iterations: int
    delta: float
    operator: SparseOperator = field(default=None, repr=False)


def nonlocal_root(solve, mass, alpha, p, tol_fp=TOL_FP, s_guess=None, max_iter=100):
    """Find ``s`` with ``||u(s)|| = s`` where ``u(s)`` solves a shifted SPD system.

    ``solve(c)`` returns ``(u, resolve)`` for the operator ``K + c M`` and a
    function that solves further right-hand sides with that same operator;
    ``mass`` applies ``M``.  Newton steps on ``phi`` are taken inside a
    shrinking bracket and replaced by bisection whenever they leave it, so the
    iteration keeps the global convergence of bisection.
    """
    norm = lambda v: float(np.sqrt(max(v @ mass(v), 0.0)))
    u0, resolve0 = solve(0.0)
    s_max = norm(u0)
    if alpha == 0 or s_max == 0.0:
        return RootResult(s_max, u0, 1, [(0.0, s_max)], resolve0)
    lo, hi = 0.0, s_max
    s = s_max / 2 if s_guess is None else min(max(s_guess, 0.0), s_max)
    traj = []
    hits = 0
    for k in range(1, max_iter + 1):
        u, resolve = solve(alpha * s**p)
        n = norm(u)
        phi = n - s
        traj.append((s, phi))
        # one extra Newton step after the first hit reaches the roundoff floor
        if abs(phi) <= tol_fp * (1 + s):
            hits += 1
            if hits == 2 or abs(phi) <= 1e-2 * tol_fp:
                break
        if phi > 0:
            lo = s
        else:
            hi = s
        du = resolve(-alpha * p * s ** (p - 1) * mass(u))
        dphi = (u @ mass(du)) / n - 1.0 if n > 0 else -1.0
        step = -phi / dphi
        s_new = s + step
        if not lo < s_new < hi:
            s_new = 0.5 * (lo + hi)
        if abs(s_new - s) <= 4 * np.finfo(float).eps * (1 + s):
            break
        s = s_new
    if abs(phi) > tol_fp * (1 + s):
        raise SolverError("nonlocal amplitude iteration did not converge",
                          residual=abs(phi), trajectory=traj)
    return RootResult(n, u, len(traj), traj, resolve)


def load_vector(mesh, phys, theta, ops):
    """``F = M f + M_1 theta`` with ``theta`` supported on inclusion nodes."""
    F = ops.M @ phys.body_force(mesh.nodes)
    if theta is not None:
        F = F + ops.M_incl @ theta
    return F


def zero_control(mesh):
    return np.zeros(2 * mesh.n_nodes)


def check_control(mesh, theta):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (2 * mesh.n_nodes,):
        raise ValidationError("control has the wrong length for this mesh")
    mask = np.ones(len(theta), dtype=bool)
    mask[mesh.inclusion_dofs] = False
    if np.any(theta[mask] != 0.0):
        raise ValidationError("control must vanish outside the inclusion nodes")
    return theta


def _shifted_solver(K, M, F, tol, method):
    def solve(c):
        op = K.plus(c, M)
        resolve = lambda r: solve_spd(op, r, tol=tol, method=method)
        u = resolve(F)
        resolve.operator = op
        return u, resolve
    return solve


def solve_state(mesh, contrast, phys, theta=None, *, s_guess=None, method="direct"):
    """Discrete minimizer of the total energy for a given control."""
    if not isinstance(contrast, ContrastField):
        raise ValidationError("solve_state needs a ContrastField")
    ops = macro_operators(mesh, contrast.A)
    if theta is not None:
        theta = check_control(mesh, theta)
    K = ops.stiffness(contrast.delta)
    F = load_vector(mesh, phys, theta, ops)
    solve = _shifted_solver(K, ops.M.matrix, F, phys.tol_lin, method)
    root = nonlocal_root(solve, ops.M.matrix.dot, phys.alpha, phys.p, phys.tol_fp, s_guess)
    energy = _energy(root.u, K, F, phys, ops)
    return StateSolution(root.u, root.s, energy, root.iterations, contrast.delta,
                         root.resolve.operator)


def _energy(u, K, F, phys, ops):
    s = ops.l2(u)
    return EnergyReport(
        elastic=0.5 * float(u @ (K @ u)),
        nonlocal_=phys.alpha / (phys.p + 2) * s ** (phys.p + 2),
        load=float(F @ u),
    )


def total_energy(u, mesh, contrast, phys, theta=None):
    """Elastic, nonlocal and load parts of the total energy at ``u``."""
    ops = macro_operators(mesh, contrast.A)
    K = ops.stiffness(contrast.delta)
    return _energy(np.asarray(u, dtype=float), K, load_vector(mesh, phys, theta, ops), phys, ops)


def state_residual(u, mesh, contrast, phys, theta=None):
    """Relative Euclidean residual of the discrete state equation on the free DOFs."""
    ops = macro_operators(mesh, contrast.A)
    K = ops.stiffness(contrast.delta)
    F = load_vector(mesh, phys, theta, ops)
    s = ops.l2(u)
    r = (K @ u + phys.alpha * s**phys.p * (ops.M @ u) - F)[K.free]
    scale = np.linalg.norm(F[K.free])
    return float(np.linalg.norm(r) / scale) if scale > 0 else float(np.linalg.norm(r))


def control_norm(mesh, theta, ops):
    return float(np.sqrt(max(theta @ (ops.M_incl @ theta), 0.0)))


def control_to_state_lipschitz_probe(mesh, contrast, phys, theta1, theta2):
    """``||u1 - u2||_{L2(Omega)} / ||theta1 - theta2||_{L2(Omega1)}``."""
    ops = macro_operators(mesh, contrast.A)
    d = np.asarray(theta1, float) - np.asarray(theta2, float)
    dn = control_norm(mesh, d, ops)
    if dn == 0.0:
        raise ValidationError("Lipschitz probe needs two different controls")
    u1 = solve_state(mesh, contrast, phys, theta1).u
    u2 = solve_state(mesh, contrast, phys, theta2).u
    return ops.l2(u1 - u2) / dn


def apriori_ratio(u, mesh, contrast, ops, rhs_norm):
    """``(delta ||e(u)||_{Omega1} + ||e(u)||_{Omega2}) / rhs_norm``."""
    if rhs_norm == 0:
        return 0.0
    lhs = contrast.delta * ops.strain_norm(u, INCLUSION) + ops.strain_norm(u, MATRIX)
    return lhs / rhs_norm
