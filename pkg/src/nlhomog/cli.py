"""Command-line entry point ``nlhomog``."""
from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from . import io
from .cell import compute_hom_tensor, validate_hom_tensor
from .errors import NlhomogError, ValidationError
from .fem import ContrastField, HookeTensor, macro_operators
from .geometry import CellGeometry, MacroMesh, build_cell_mesh, build_macro_mesh
from .harness import CONFIG_KEYS, SweepConfig, run_sweep
from .ocp import optimize_control
from .presets import interpolate, parse_field
from .state import PhysicsParams, solve_state
from .twoscale import LimitProblem, TwoScaleState, limit_grid, limit_problem
from .unfolding import two_scale_error


def _kappa(text):
    t = str(text).lower()
    if t in ("inf", "infinite", "infinity"):
        return math.inf
    k = float(t)
    if not k > 0:
        raise argparse.ArgumentTypeError("kappa must be positive or inf")
    return k


def _strip(spec):
    return spec[len("preset:"):] if spec.startswith("preset:") else spec


def _phys(args):
    return PhysicsParams(args.alpha, args.p, _strip(args.f), _strip(getattr(args, "ud", "zero")),
                         getattr(args, "gamma", 1e-2), tol_fp=args.tol_fp, tol_lin=args.tol_lin)


def _macro(path):
    mesh = io.read_mesh(path)
    if not isinstance(mesh, MacroMesh):
        raise ValidationError(f"{path} holds a cell mesh; a macro mesh is needed")
    return mesh


def _mesh_meta(mesh, args, delta):
    g = mesh.cell.geometry
    return {"shape": g.shape, "size": repr(g.size), "resolution": g.resolution, "n": mesh.n,
            "gamma0": ",".join(mesh.gamma0), "eps": repr(mesh.epsilon), "delta": repr(delta),
            "A": args.A, "alpha": args.alpha, "p": args.p, "f": _strip(args.f)}


def _theta(mesh, spec):
    theta = np.zeros(2 * mesh.n_nodes)
    if spec != "zero":
        vals = interpolate(parse_field(_strip(spec)), mesh.nodes)
        theta[mesh.inclusion_dofs] = vals[mesh.inclusion_dofs]
    return theta


def cmd_mesh(args):
    cell = build_cell_mesh(CellGeometry(args.shape, args.radius, args.res))
    mesh = build_macro_mesh(cell, args.n, tuple(args.gamma0.split(","))) if args.n else cell
    io.write_mesh(args.out, mesh)
    print(f"wrote {args.out}: {len(mesh.nodes)} nodes, {len(mesh.elements)} elements, "
          f"|Y1| = {cell.area(1):.6g}")


def cmd_state(args):
    mesh = _macro(args.mesh)
    A = HookeTensor.parse(args.A)
    phys = _phys(args)
    st = solve_state(mesh, ContrastField(A, args.delta), phys, _theta(mesh, args.theta))
    footer = {"s_star": st.s_star, "elastic": st.energy.elastic,
              "nonlocal": st.energy.nonlocal_, "load": st.energy.load,
              "total": st.energy.total}
    io.write_nodal_field(args.out, mesh, st.u, _mesh_meta(mesh, args, args.delta), footer)
    print(f"s* = {st.s_star:.10g}, energy = {st.energy.total:.10g}, "
          f"{st.iterations} amplitude iterations")


def cmd_ocp(args):
    mesh = _macro(args.mesh)
    A = HookeTensor.parse(args.A)
    phys = _phys(args)
    res = optimize_control(mesh, ContrastField(A, args.delta), phys, tol=args.tol,
                           max_iter=args.max_iter, multistart=args.multistart, seed=args.seed)
    ops = macro_operators(mesh, A)
    scale = 1.0 + ops.l2(phys.target(mesh.nodes))
    rows = [(k, c, g, g / scale) for k, (c, g) in
            enumerate(zip(res.cost_history, res.grad_history))]
    nodes = mesh.inclusion_nodes
    T = res.Theta.reshape(-1, 2)
    block = ("theta", ["node", "x", "y", "theta1", "theta2"],
             [(i, *mesh.nodes[i], *T[i]) for i in nodes])
    meta = _mesh_meta(mesh, args, args.delta)
    meta.update({"gamma": args.gamma, "u_d": _strip(args.ud)})
    if res.multistart:
        meta["multistart_disagree"] = res.multistart["disagree"]
    footer = {"cost": res.cost, **{f"residual_{k}": v for k, v in res.residuals.items()}}
    io.write_table(args.out, meta, ["iteration", "cost", "grad_norm", "optimality_residual"],
                   rows, footer, [block])
    print(f"cost = {res.cost:.10g} after {res.iterations} iterations; residuals "
          + ", ".join(f"{k}={v:.2e}" for k, v in res.residuals.items()))


def _cell_of(path):
    mesh = io.read_mesh(path)
    return mesh.cell if isinstance(mesh, MacroMesh) else mesh


def cmd_cell(args):
    cell = _cell_of(args.mesh)
    H = compute_hom_tensor(cell, HookeTensor.parse(args.A))
    validate_hom_tensor(H)
    io.write_hom_tensor(args.out, H, {"A": args.A})
    print(np.array2string(H.voigt, precision=10))


def cmd_limit(args):
    cell = _cell_of(args.cell)
    A = HookeTensor.parse(args.A)
    H = compute_hom_tensor(cell, A)
    grid = limit_grid(args.macro_n)
    phys = _phys(args)
    pb = limit_problem(grid, H, cell, A, phys, args.kappa)
    st = pb.solve_state(_limit_theta(pb, args.theta))
    g = cell.geometry
    meta = {"shape": g.shape, "size": repr(g.size), "resolution": g.resolution,
            "m": args.macro_n, "kappa": args.kappa, "A": args.A, "alpha": args.alpha,
            "p": args.p, "f": _strip(args.f), "theta": args.theta,
            "geometry_hash": cell.geometry_hash}
    footer = {"s_star": st.s, "elastic": st.energy.elastic, "nonlocal": st.energy.nonlocal_,
              "load": st.energy.load, "total": st.energy.total}
    blocks = []
    if st.W is not None:
        norms = np.sqrt(np.maximum(np.einsum("ei,ij,ej->e", st.W, pb.MY, st.W), 0.0))
        blocks.append(("w_norm", ["element", "norm"], [(e, v) for e, v in enumerate(norms)]))
        blocks.append(("W", ["element", "k", "value"],
                       [(e, k, v) for e in range(pb.nE) for k, v in enumerate(st.W[e])]))
    io.write_nodal_field(args.out, grid, st.u0, meta, footer, blocks)
    print(f"s* = {st.s:.10g}, limit energy = {st.energy.total:.10g}")


def _limit_theta(pb, spec):
    if spec == "zero":
        return None
    fn = parse_field(_strip(spec))
    # element-constant in x, nodal in y
    c = pb.grid.nodes[pb.grid.elements].mean(axis=1)
    vals = interpolate(fn, c).reshape(-1, 2)
    return np.tile(vals, (1, pb.nth // 2))


def _load_limit(path, cell):
    meta, blocks, footer = io.read_table(path)
    A = HookeTensor.parse(meta["A"])
    phys = PhysicsParams(float(meta["alpha"]), float(meta["p"]), meta["f"])
    H = compute_hom_tensor(cell, A)
    pb = LimitProblem(limit_grid(int(meta["m"])), H, cell, A, phys, _kappa(meta["kappa"]))
    u0 = blocks["main"][1][:, 3:5].ravel()
    W = None
    if "W" in blocks:
        W = np.zeros((pb.nE, pb.nW))
        arr = blocks["W"][1]
        W[arr[:, 0].astype(int), arr[:, 1].astype(int)] = arr[:, 2]
    st = TwoScaleState(u0, W, footer.get("s_star", 0.0), None, pb.kappa, 0, pb)
    return st, meta


def cmd_unfold(args):
    meta, u, _, _ = io.read_nodal_field(args.state)
    cell = build_cell_mesh(CellGeometry(meta["shape"], float(meta["size"]),
                                        int(meta["resolution"])))
    macro = build_macro_mesh(cell, int(meta["n"]), tuple(meta["gamma0"].split(",")))
    st, lmeta = _load_limit(args.limit, cell)
    err = two_scale_error(u, macro, st, relative=args.relative)
    io.write_table(args.out, {"state": args.state, "limit": args.limit},
                   ["eps", "delta", "kappa", "error"],
                   [(macro.epsilon, float(meta["delta"]), st.kappa, err)])
    print(f"eps = {macro.epsilon:.6g}, error = {err:.6e}")


def cmd_sweep(args):
    cfg = SweepConfig.from_toml(args.config) if args.config else SweepConfig()
    if args.kappa is not None:
        cfg = SweepConfig(**{**cfg.__dict__, "kappa": args.kappa})
    progress = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    results, lines = run_sweep(cfg, args.out, ocp=not args.no_ocp, progress=progress)
    print("\n".join(lines))
    return 0 if all(v.passed for r in results for v in r.verdicts) else 1


def _physics_args(p, gamma=False):
    p.add_argument("--A", default="iso:lambda=1,mu=1", help="Hooke tensor, iso:... or voigt:...")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--p", type=float, default=2.0)
    p.add_argument("--f", default="preset:const", help="body force preset")
    p.add_argument("--tol-fp", type=float, default=1e-10)
    p.add_argument("--tol-lin", type=float, default=1e-10)
    if gamma:
        p.add_argument("--gamma", type=float, default=1e-2)
        p.add_argument("--ud", default="preset:zero", help="target state preset")


def build_parser():
    ap = argparse.ArgumentParser(prog="nlhomog", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="build a cell or macro mesh")
    p.add_argument("--shape", default="disk", choices=["disk", "square", "none"])
    p.add_argument("--radius", type=float, default=0.25, help="disk radius or square half-width")
    p.add_argument("--res", type=int, default=16)
    p.add_argument("--n", type=int, default=0, help="cells per side; 0 writes the cell mesh")
    p.add_argument("--gamma0", default="left", help="clamped faces, comma separated")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("state", help="solve the state equation")
    p.add_argument("--mesh", required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--theta", default="zero", help="control preset on the inclusions")
    _physics_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_state)

    p = sub.add_parser("ocp", help="solve the optimal control problem")
    p.add_argument("--mesh", required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--multistart", type=int, default=0, help="extra random starts")
    p.add_argument("--seed", type=int, default=0)
    _physics_args(p, gamma=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ocp)

    p = sub.add_parser("cell", help="cell correctors and homogenized tensor")
    p.add_argument("--mesh", required=True)
    p.add_argument("--A", default="iso:lambda=1,mu=1")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cell)

    p = sub.add_parser("limit", help="two-scale limit state")
    p.add_argument("--cell", required=True)
    p.add_argument("--macro-n", type=int, default=32)
    p.add_argument("--kappa", type=_kappa, default=math.inf)
    p.add_argument("--theta", default="zero")
    _physics_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_limit)

    p = sub.add_parser("unfold", help="two-scale error of a state against a limit")
    p.add_argument("--state", required=True)
    p.add_argument("--limit", required=True)
    p.add_argument("--relative", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_unfold)

    keys = "\n".join(f"  {k:16s} {v}" for k, v in CONFIG_KEYS.items())
    p = sub.add_parser("sweep", help="convergence sweep",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="config keys (TOML, flat):\n" + keys)
    p.add_argument("--config", default=None)
    p.add_argument("--kappa", type=_kappa, default=None, help="override the config kappa")
    p.add_argument("--no-ocp", action="store_true")
    p.add_argument("--verbose", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        rc = args.func(args)
    except NlhomogError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return rc or 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
