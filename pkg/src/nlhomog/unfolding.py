"""Periodic unfolding on congruent meshes and two-scale error norms.

``T_eps(u)(x, y) = u(eps [x / eps] + eps y)``.  Because the macro mesh is an
exact tiling by copies of the cell mesh, unfolding nodal data is a pure
re-indexing: ``U[k, a] = u[node(eps k + eps y_a)]``.
"""
from __future__ import annotations

import numpy as np

from .errors import MeshError
from .fem import GAUSS_POINTS, GAUSS_WEIGHTS, assemble, shape_functions


def _check(macro, u):
    u = np.asarray(u, dtype=float)
    if u.shape != (2 * macro.n_nodes,) and u.shape != (macro.n_nodes,):
        raise MeshError("field does not match the macro mesh")
    if macro.unfold_index.shape != (macro.n**2, macro.cell.n_nodes):
        raise MeshError("macro mesh is not congruent with its cell mesh")
    return u


def unfold(u, macro):
    """Unfolded nodal values of shape ``(n^2, cell nodes, 2)``; scalars drop the last axis."""
    u = _check(macro, u)
    if u.shape == (macro.n_nodes,):
        return u[macro.unfold_index]
    return u.reshape(-1, 2)[macro.unfold_index]


def fold(U, macro):
    """Inverse of ``unfold``; raises if shared nodes carry different values."""
    U = np.asarray(U, dtype=float)
    vector = U.ndim == 3
    out = np.full((macro.n_nodes, 2) if vector else macro.n_nodes, np.nan)
    idx = macro.unfold_index.ravel()
    vals = U.reshape(len(idx), -1) if vector else U.ravel()
    out[idx] = vals
    if np.isnan(out).any():
        raise MeshError("unfolded data does not cover every macro node")
    if not np.allclose(out[idx], vals, rtol=0, atol=0):
        raise MeshError("unfolded copies of a shared node disagree")
    return out.ravel()


def _cell_mass(cell):
    cache = cell.__dict__.setdefault("_mass_cache", {})
    if "M" not in cache:
        cache["M"] = assemble(cell, None, "mass", constrained=[]).matrix
    return cache["M"]


def unfolded_norm(U, macro):
    """``||U||_{L2(Omega x Y)}`` of an unfolded vector field."""
    M = _cell_mass(macro.cell)
    flat = U.reshape(U.shape[0], -1)
    return float(np.sqrt(max(np.einsum("ki,ki->", flat, (M @ flat.T).T), 0.0) * macro.epsilon**2))


def unfold_integral_gap(psi, macro):
    """``|int_Omega psi - int_{Omega x Y} T_eps(psi)|`` for a scalar nodal field or function."""
    if callable(psi):
        psi = np.asarray(psi(macro.nodes), dtype=float)
    psi = _check(macro, psi)
    if psi.shape != (macro.n_nodes,):
        raise MeshError("integral gap expects a scalar nodal field")
    Mx = assemble(macro, None, "mass", constrained=[]).matrix
    w_macro = np.asarray(Mx.sum(axis=1)).ravel()[0::2]
    w_cell = np.asarray(_cell_mass(macro.cell).sum(axis=1)).ravel()[0::2]
    lhs = float(w_macro @ psi)
    rhs = float(np.sum(unfold(psi, macro) @ w_cell)) * macro.epsilon**2
    return abs(lhs - rhs)


def _cell_samples(cell, elements):
    """Gauss points of the given cell elements: coordinates, weights and shape values."""
    N, _ = shape_functions(GAUSS_POINTS)
    h = cell.h
    corner = cell.nodes[cell.elements[elements, 0]]
    y = corner[:, None, :] + h * GAUSS_POINTS[None, :, :]
    w = np.broadcast_to(GAUSS_WEIGHTS * h * h, y.shape[:2])
    return y, w, N


def _eval_cell_field(V, cell, elements, N):
    """Values of nodal cell fields ``V[..., node, 2]`` at the Gauss points of ``elements``."""
    conn = cell.elements[elements]
    return np.einsum("qa,...eac->...eqc", N, V[..., conn, :])


def _eval_macro(grid, u0, x):
    """Bilinear interpolation of a nodal field on a QuadGrid at points ``x`` (P, 2)."""
    e, loc = grid.locate(x)
    N, _ = shape_functions(loc)
    vals = u0.reshape(-1, 2)[grid.elements[e]]
    return np.einsum("pa,pac->pc", N, vals), e


def _two_scale_points(macro, elements):
    cell = macro.cell
    y, w, N = _cell_samples(cell, elements)
    eps = macro.epsilon
    n = macro.n
    k = np.arange(n * n)
    corner = np.column_stack([k % n, k // n]).astype(float)
    x = eps * (corner[:, None, None, :] + y[None])
    return x, w, N


def two_scale_error(u_eps, macro, limit, relative=False):
    """``||T_eps(u_eps) - (u0 + W / kappa)||_{L2(Omega x Y)}``."""
    pb = limit.problem
    cell = macro.cell
    if pb.cell.resolution != cell.resolution or pb.cell.geometry_hash != cell.geometry_hash:
        raise MeshError("limit state was computed on a different cell mesh")
    elements = np.arange(cell.n_elements)
    x, w, N = _two_scale_points(macro, elements)
    Ue = _eval_cell_field(unfold(u_eps, macro), cell, elements, N)
    P = x.reshape(-1, 2)
    lim, E = _eval_macro(pb.grid, limit.u0, P)
    lim = lim.reshape(Ue.shape)
    if limit.W is not None:
        Wfull = np.zeros((pb.nE, cell.n_nodes, 2))
        Wfull.reshape(pb.nE, -1)[:, pb.w_dofs] = limit.W
        Wq = _eval_cell_field(Wfull, cell, elements, N)
        E = E.reshape(Ue.shape[:3])
        eidx = np.broadcast_to(elements[None, :, None], E.shape)
        qidx = np.broadcast_to(np.arange(4)[None, None, :], E.shape)
        lim = lim + Wq[E, eidx, qidx] / pb.kappa
    d = Ue - lim
    err2 = macro.epsilon**2 * np.einsum("eq,keqc->", w, d * d)
    if relative:
        ref2 = macro.epsilon**2 * np.einsum("eq,keqc->", w, lim * lim)
        return float(np.sqrt(err2 / ref2)) if ref2 > 0 else float(np.sqrt(err2))
    return float(np.sqrt(err2))


def control_error(theta_eps, macro, theta_hat, problem, relative=False, norm="l2"):
    """``||T_eps(theta_eps) - theta_hat||_{L2(Omega x Y1)}``, or the max over Gauss points."""
    if norm not in ("l2", "max"):
        raise ValueError(f"unknown norm {norm!r}")
    cell = macro.cell
    elements = cell.y1_elements
    x, w, N = _two_scale_points(macro, elements)
    Te = _eval_cell_field(unfold(theta_eps, macro), cell, elements, N)
    _, E = _eval_macro(problem.grid, np.zeros(2 * problem.grid.n_nodes), x.reshape(-1, 2))
    Hfull = np.zeros((problem.nE, cell.n_nodes, 2))
    Hfull.reshape(problem.nE, -1)[:, problem.theta_dofs] = theta_hat
    Hq = _eval_cell_field(Hfull, cell, elements, N)
    E = E.reshape(Te.shape[:3])
    eidx = np.broadcast_to(np.arange(len(elements))[None, :, None], E.shape)
    qidx = np.broadcast_to(np.arange(4)[None, None, :], E.shape)
    ref = Hq[E, eidx, qidx]
    d = Te - ref
    if norm == "max":
        err = float(np.abs(d).max())
        scale = float(np.abs(ref).max())
        return err / scale if relative and scale > 0 else err
    err2 = macro.epsilon**2 * np.einsum("eq,keqc->", w, d * d)
    if relative:
        ref2 = macro.epsilon**2 * np.einsum("eq,keqc->", w, ref * ref)
        return float(np.sqrt(err2 / ref2)) if ref2 > 0 else float(np.sqrt(err2))
    return float(np.sqrt(err2))
