"""Sweeps over the period eps = 1/n at a fixed contrast regime kappa = lim delta/eps.

Each row solves the microscopic problem at one ``n`` and compares it with
the limit problem solved once per sweep.  Results go to CSV files and a plain
text summary with one verdict line per convergence claim.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .cell import compute_hom_tensor, validate_hom_tensor
from .errors import ValidationError
from .fem import ContrastField, HookeTensor, korn_diagnostic, macro_operators
from .geometry import CellGeometry, build_cell_mesh, build_macro_mesh
from .ocp import optimize_control
from .state import PhysicsParams, apriori_ratio, control_norm, solve_state
from .twoscale import limit_grid, limit_problem
from .unfolding import control_error, two_scale_error

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib


@dataclass(frozen=True)
class SweepConfig:
    kappa: float = 1.0
    n_list: tuple = (2, 4, 8)
    q: float = 0.5
    shape: str = "square"
    size: float = 0.25
    resolution: int = 8
    lam: float = 1.0
    mu: float = 1.0
    alpha: float = 1.0
    p: float = 2.0
    f: str = "const"
    u_d: str = "zero"
    gamma: float = 1e-2
    limit_m: int = 64
    lipschitz_pairs: int = 20
    seed: int = 0
    tol_fp: float = 1e-10
    tol_lin: float = 1e-10
    max_iter: int = 500

    def __post_init__(self):
        k = self.kappa
        if isinstance(k, str):
            k = math.inf if k.lower() in ("inf", "infinite", "infinity") else float(k)
            object.__setattr__(self, "kappa", k)
        if not k > 0:
            raise ValidationError(f"kappa must be positive or infinite, got {k}")
        if not 0.0 < self.q < 1.0:
            raise ValidationError(f"delta exponent q must lie in (0, 1), got {self.q}")
        ns = tuple(int(n) for n in self.n_list)
        if not ns or any(n < 1 for n in ns) or list(ns) != sorted(set(ns)):
            raise ValidationError("n_list must be strictly increasing positive integers")
        object.__setattr__(self, "n_list", ns)

    @property
    def finite(self):
        return math.isfinite(self.kappa)

    def delta(self, n):
        """``kappa eps`` for finite kappa, ``eps^q`` otherwise, capped at 1."""
        eps = 1.0 / n
        d = self.kappa * eps if self.finite else eps**self.q
        if d > 1.0:
            raise ValidationError(f"delta = {d} exceeds 1 at n = {n}")
        return d

    def phys(self):
        return PhysicsParams(self.alpha, self.p, self.f, self.u_d, self.gamma,
                             self.tol_fp, self.tol_lin)

    def hooke(self):
        return HookeTensor.isotropic(self.lam, self.mu)

    def geometry(self):
        return CellGeometry(self.shape, self.size, self.resolution)

    @classmethod
    def from_toml(cls, path):
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        if "n_list" in data:
            data["n_list"] = tuple(data["n_list"])
        return cls(**data)


CONFIG_KEYS = {
    "kappa": "contrast regime, a positive number or \"inf\"",
    "n_list": "cells per side for each row, e.g. [2, 4, 8]",
    "q": "delta = eps^q when kappa is infinite",
    "shape": "inclusion shape: square, disk or none",
    "size": "square half-width or disk radius",
    "resolution": "cell elements per edge (power of two)",
    "lam": "Lame lambda", "mu": "Lame mu",
    "alpha": "nonlocal strength", "p": "nonlocal exponent",
    "f": "body force preset", "u_d": "target state preset",
    "gamma": "control cost weight",
    "limit_m": "macro grid size of the limit problem",
    "lipschitz_pairs": "random control pairs per Lipschitz probe",
    "seed": "random seed", "tol_fp": "amplitude tolerance",
    "tol_lin": "linear solve tolerance", "max_iter": "descent iteration cap",
}


@dataclass
class SweepRow:
    n: int
    eps: float
    delta: float
    energy: float = float("nan")
    limit_energy: float = float("nan")
    energy_gap: float = float("nan")
    state_error: float = float("nan")
    korn_ratio: float = float("nan")
    state_apriori_ratio: float = float("nan")
    lipschitz_ratio: float = float("nan")
    cost: float = float("nan")
    limit_cost: float = float("nan")
    cost_gap: float = float("nan")
    cost_at_zero: float = float("nan")
    control_error: float = float("nan")
    control_max_error: float = float("nan")
    control_norm: float = float("nan")
    adjoint_apriori_ratio: float = float("nan")
    optimality_residual: float = float("nan")
    residual_state: float = float("nan")
    residual_adjoint: float = float("nan")
    residual_control: float = float("nan")
    iterations: int = 0
    wall_time: float = 0.0


@dataclass
class Verdict:
    name: str
    passed: bool
    detail: str


@dataclass
class SweepResult:
    config: SweepConfig
    rows: list
    verdicts: list = field(default_factory=list)
    limit: dict = field(default_factory=dict)
    controls: dict = field(default_factory=dict, repr=False)

    def verdict(self, name):
        for v in self.verdicts:
            if v.name == name:
                return v
        raise KeyError(name)


def strictly_decreasing(vals):
    v = np.asarray(vals, dtype=float)
    return bool(np.all(np.isfinite(v)) and np.all(np.diff(v) < 0))


def converging(vals, halve=False):
    """Strictly decreasing (final below half the first if ``halve``), or identically zero."""
    v = np.asarray(vals, dtype=float)
    if np.all(v == 0.0):
        return True
    ok = strictly_decreasing(v)
    return bool(ok and (not halve or v[-1] < 0.5 * v[0]))


def empirical_rates(gaps):
    g = np.asarray(gaps, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return [float(r) for r in np.log2(g[:-1] / g[1:])]


def variation(vals):
    """Ratio of the larger to the smaller of the first and last values; 1 for all-zero data."""
    v = np.asarray(vals, dtype=float)
    if np.all(v == 0.0):
        return 1.0
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        return float("inf")
    return float(max(v[0], v[-1]) / min(v[0], v[-1]))


def smooth_controls(mesh, count, rng, modes=3):
    """Random low-frequency vector fields restricted to the inclusion nodes."""
    x = mesh.nodes
    out = []
    for _ in range(count):
        th = np.zeros((mesh.n_nodes, 2))
        for a in range(modes):
            for b in range(modes):
                c = rng.standard_normal(2) / (1 + a + b)
                th += np.outer(np.cos(np.pi * a * x[:, 0]) * np.cos(np.pi * b * x[:, 1]), c)
        full = np.zeros(2 * mesh.n_nodes)
        full[mesh.inclusion_dofs] = th.ravel()[mesh.inclusion_dofs]
        out.append(full)
    return out


class _Setup:
    def __init__(self, cfg):
        self.cfg = cfg
        self.A = cfg.hooke()
        self.cell = build_cell_mesh(cfg.geometry())
        self.Ahom = compute_hom_tensor(self.cell, self.A)
        self.report = validate_hom_tensor(self.Ahom)
        self.phys = cfg.phys()
        self.grid = limit_grid(cfg.limit_m)
        self.problem = limit_problem(self.grid, self.Ahom, self.cell, self.A, self.phys, cfg.kappa)


def run_energy_sweep(cfg, lipschitz=True, progress=None):
    """Microscopic energies and states against the limit, one row per ``n``."""
    su = _Setup(cfg)
    lim = su.problem.solve_state()
    m_lim = lim.energy.total
    rows = []
    rng = np.random.default_rng(cfg.seed)
    for n in cfg.n_list:
        t0 = time.perf_counter()
        mesh = build_macro_mesh(su.cell, n)
        delta = cfg.delta(n)
        contrast = ContrastField(su.A, delta)
        ops = macro_operators(mesh, su.A)
        st = solve_state(mesh, contrast, su.phys)
        f_norm = ops.l2(su.phys.body_force(mesh.nodes))
        row = SweepRow(n=n, eps=1.0 / n, delta=delta, energy=st.energy.total,
                       limit_energy=m_lim, energy_gap=abs(st.energy.total - m_lim))
        row.state_error = two_scale_error(st.u, mesh, lim)
        row.korn_ratio = korn_diagnostic(st.u, mesh, 1.0 / n, delta, ops=ops)
        row.state_apriori_ratio = apriori_ratio(st.u, mesh, contrast, ops, f_norm)
        if lipschitz and cfg.lipschitz_pairs > 0:
            row.lipschitz_ratio = _lipschitz(mesh, contrast, su.phys, ops, cfg, rng)
        row.wall_time = time.perf_counter() - t0
        rows.append(row)
        if progress:
            progress(row)
    res = SweepResult(cfg, rows, limit={"energy": m_lim, "s": lim.s,
                                        "C1": su.report.C1})
    gaps = [r.energy_gap for r in rows]
    errs = [r.state_error for r in rows]
    res.verdicts.append(Verdict(
        "energy", converging(gaps, halve=True),
        f"gaps {_fmt(gaps)} rates {_fmt(empirical_rates(gaps))}"))
    res.verdicts.append(Verdict(
        "two_scale_state", converging(errs),
        f"errors {_fmt(errs)} rates {_fmt(empirical_rates(errs))}"))
    for name in ("korn_ratio", "state_apriori_ratio", "lipschitz_ratio"):
        vals = [getattr(r, name) for r in rows]
        if np.all(np.isnan(vals)):
            continue
        var = variation(vals)
        res.verdicts.append(Verdict(name, var < 2.0, f"values {_fmt(vals)} variation {var:.3f}"))
    return res


def _lipschitz(mesh, contrast, phys, ops, cfg, rng):
    ths = smooth_controls(mesh, 2 * cfg.lipschitz_pairs, rng)
    best = 0.0
    for a, b in zip(ths[0::2], ths[1::2]):
        ua = solve_state(mesh, contrast, phys, a).u
        ub = solve_state(mesh, contrast, phys, b).u
        best = max(best, ops.l2(ua - ub) / control_norm(mesh, a - b, ops))
    return best


def run_ocp_sweep(cfg, progress=None):
    """Microscopic optimal controls against the limit optimal control."""
    from .twoscale import solve_limit_ocp

    su = _Setup(cfg)
    lim = solve_limit_ocp(su.grid, su.Ahom, su.cell, su.A, su.phys, cfg.kappa,
                          max_iter=cfg.max_iter)
    rows, thetas = [], {}
    for n in cfg.n_list:
        t0 = time.perf_counter()
        mesh = build_macro_mesh(su.cell, n)
        delta = cfg.delta(n)
        contrast = ContrastField(su.A, delta)
        ops = macro_operators(mesh, su.A)
        r = optimize_control(mesh, contrast, su.phys, max_iter=cfg.max_iter)
        ud = su.phys.target(mesh.nodes)
        row = SweepRow(n=n, eps=1.0 / n, delta=delta, cost=r.cost, limit_cost=lim.cost,
                       cost_gap=abs(r.cost - lim.cost), cost_at_zero=r.cost_history[0])
        row.control_error = control_error(r.Theta, mesh, lim.Theta, su.problem)
        row.control_max_error = control_error(r.Theta, mesh, lim.Theta, su.problem,
                                              relative=True, norm="max")
        row.control_norm = control_norm(mesh, r.Theta, ops)
        row.adjoint_apriori_ratio = apriori_ratio(r.v, mesh, contrast, ops, ops.l2(r.u.u - ud))
        row.optimality_residual = r.optimality_residual
        row.residual_state = r.residuals["state"]
        row.residual_adjoint = r.residuals["adjoint"]
        row.residual_control = r.residuals["control"]
        row.iterations = r.iterations
        row.wall_time = time.perf_counter() - t0
        rows.append(row)
        thetas[n] = r.Theta
        if progress:
            progress(row)
    res = SweepResult(cfg, rows, controls=thetas,
                      limit={"cost": lim.cost, "iterations": lim.iterations,
                             "optimality_residual": lim.optimality_residual})
    res.limit["Theta"] = lim.Theta
    gaps = [r.cost_gap for r in rows]
    errs = [r.control_error for r in rows]
    res.verdicts.append(Verdict("cost", converging(gaps),
                                f"gaps {_fmt(gaps)} rates {_fmt(empirical_rates(gaps))}"))
    res.verdicts.append(Verdict("control", converging(errs), f"errors {_fmt(errs)}"))
    pts = [r.control_max_error for r in rows]
    res.verdicts.append(Verdict("control_pointwise", converging(pts),
                                f"relative max errors {_fmt(pts)}"))
    base = all(r.cost <= r.cost_at_zero for r in rows)
    res.verdicts.append(Verdict("cost_below_zero_control", base,
                                f"costs {_fmt([r.cost for r in rows])}"))
    for name in ("adjoint_apriori_ratio", "control_norm"):
        vals = [getattr(r, name) for r in rows]
        var = variation(vals)
        res.verdicts.append(Verdict(name, var < 2.0, f"values {_fmt(vals)} variation {var:.3f}"))
    return res


def _fmt(vals):
    return "[" + ", ".join(f"{v:.4g}" for v in vals) + "]"


def write_rows(path, result, columns):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        cfg = asdict(result.config)
        for k, v in cfg.items():
            fh.write(f"# {k}={v}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in result.rows:
            w.writerow([_cell(getattr(r, c)) for c in columns])


def _cell(v):
    return f"{v:.12g}" if isinstance(v, float) else v


ENERGY_COLUMNS = ["n", "eps", "delta", "energy", "limit_energy", "energy_gap", "state_error",
                  "korn_ratio", "state_apriori_ratio", "lipschitz_ratio", "wall_time"]
OCP_COLUMNS = ["n", "eps", "delta", "cost", "limit_cost", "cost_gap", "cost_at_zero",
               "control_error", "control_max_error", "control_norm", "adjoint_apriori_ratio",
               "optimality_residual", "residual_state", "residual_adjoint", "residual_control",
               "iterations", "wall_time"]


def write_summary(path, results):
    lines = []
    for res in results:
        k = res.config.kappa
        lines.append(f"[kappa={k}] limit: " + ", ".join(
            f"{a}={b:.10g}" for a, b in res.limit.items() if isinstance(b, (int, float))))
        for v in res.verdicts:
            lines.append(f"  {'PASS' if v.passed else 'FAIL'} {v.name}: {v.detail}")
    Path(path).write_text("\n".join(lines) + "\n")
    return lines


def run_sweep(cfg, out_dir, ocp=True, progress=None):
    """Energy and (optionally) OCP sweeps, written to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    er = run_energy_sweep(cfg, progress=progress)
    write_rows(out / "energy.csv", er, ENERGY_COLUMNS)
    results = [er]
    if ocp:
        orr = run_ocp_sweep(cfg, progress=progress)
        write_rows(out / "ocp.csv", orr, OCP_COLUMNS)
        results.append(orr)
    return results, write_summary(out / "summary.txt", results)


def with_kappa(cfg, kappa, **kw):
    return replace(cfg, kappa=kappa, **kw)
