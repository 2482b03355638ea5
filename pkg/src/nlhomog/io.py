"""Line-oriented text formats for meshes, fields and tensors.

Every file starts with ``# key=value`` metadata lines.  Meshes carry enough
metadata to be rebuilt deterministically; the tables are checked against the
rebuilt mesh when read back.
"""
from __future__ import annotations

import csv
import io as _io
from pathlib import Path

import numpy as np

from .errors import MeshError
from .geometry import CellGeometry, CellMesh, MacroMesh, build_cell_mesh, build_macro_mesh

MESH_MAGIC = "nlhomog-mesh 1"


def _meta_lines(meta):
    return [f"# {k}={v}" for k, v in meta.items()]


def _parse_meta(lines):
    meta = {}
    for line in lines:
        if line.startswith("#") and "=" in line:
            k, _, v = line[1:].strip().partition("=")
            meta[k.strip()] = v.strip()
    return meta


def write_mesh(path, mesh):
    if isinstance(mesh, MacroMesh):
        cell, kind, n, gamma0 = mesh.cell, "macro", mesh.n, ",".join(mesh.gamma0)
        region = mesh.region
    elif isinstance(mesh, CellMesh):
        cell, kind, n, gamma0 = mesh, "cell", 0, ""
        region = mesh.region
    else:
        raise MeshError("can only write cell or macro meshes")
    g = cell.geometry
    out = [MESH_MAGIC, "dim 2", f"kind {kind}", f"n {n}", f"resolution {g.resolution}",
           f"shape {g.shape}", f"size {g.size!r}", f"gamma0 {gamma0}",
           f"nodes {len(mesh.nodes)}"]
    out += [f"{i} {x:.17g} {y:.17g}" for i, (x, y) in enumerate(mesh.nodes)]
    out.append(f"elements {len(mesh.elements)}")
    out += [f"{e} {a} {b} {c} {d} {int(t)}" for e, ((a, b, c, d), t)
            in enumerate(zip(mesh.elements, region))]
    Path(path).write_text("\n".join(out) + "\n")


def read_mesh(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != MESH_MAGIC:
        raise MeshError(f"{path} is not a mesh file")
    head = {}
    i = 1
    while not lines[i].startswith("nodes"):
        k, _, v = lines[i].partition(" ")
        head[k] = v.strip()
        i += 1
    n_nodes = int(lines[i].split()[1])
    nodes = np.array([[float(t) for t in ln.split()[1:3]] for ln in lines[i + 1:i + 1 + n_nodes]])
    i += 1 + n_nodes
    n_el = int(lines[i].split()[1])
    tab = np.array([[int(t) for t in ln.split()[1:6]] for ln in lines[i + 1:i + 1 + n_el]])
    geom = CellGeometry(head["shape"], float(head["size"]), int(head["resolution"]))
    cell = build_cell_mesh(geom)
    if head["kind"] == "macro":
        faces = tuple(f for f in head.get("gamma0", "left").split(",") if f)
        mesh = build_macro_mesh(cell, int(head["n"]), faces or ("left",))
    else:
        mesh = cell
    if (nodes.shape != mesh.nodes.shape or np.abs(nodes - mesh.nodes).max() > 1e-12
            or not np.array_equal(tab[:, :4], mesh.elements)
            or not np.array_equal(tab[:, 4], mesh.region)):
        raise MeshError(f"{path} does not match the mesh rebuilt from its header")
    return mesh


def write_table(path, meta, columns, rows, footer=None, blocks=()):
    """CSV with metadata comments, one table, optional extra blocks and a footer comment."""
    buf = _io.StringIO()
    for ln in _meta_lines(meta):
        buf.write(ln + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([f"{v:.17g}" if isinstance(v, (float, np.floating)) else v for v in r])
    for name, cols, brows in blocks:
        buf.write(f"# block={name}\n")
        w.writerow(cols)
        for r in brows:
            w.writerow([f"{v:.17g}" if isinstance(v, (float, np.floating)) else v for v in r])
    if footer:
        buf.write("# footer " + ",".join(f"{k}={v:.17g}" if isinstance(v, float) else f"{k}={v}"
                                        for k, v in footer.items()) + "\n")
    Path(path).write_text(buf.getvalue())


def read_table(path):
    """Return ``(meta, {block: (columns, array)}, footer)``; the main table is block ``main``."""
    text = Path(path).read_text().splitlines()
    meta, footer, blocks = {}, {}, {}
    name, cols, rows = "main", None, []

    def flush():
        if cols is not None:
            blocks[name] = (cols, np.array(rows, dtype=float).reshape(len(rows), len(cols)))

    for line in text:
        if line.startswith("# footer "):
            for item in line[len("# footer "):].split(","):
                k, _, v = item.partition("=")
                footer[k] = float(v)
        elif line.startswith("# block="):
            flush()
            name, cols, rows = line.split("=", 1)[1].strip(), None, []
        elif line.startswith("#"):
            if cols is None and name == "main":
                meta.update(_parse_meta([line]))
        elif cols is None:
            cols = next(csv.reader([line]))
        elif line.strip():
            rows.append([float(t) for t in next(csv.reader([line]))])
    flush()
    return meta, blocks, footer


def write_nodal_field(path, mesh, u, meta, footer=None, blocks=()):
    U = np.asarray(u).reshape(-1, 2)
    rows = [(i, x, y, a, b) for i, ((x, y), (a, b)) in enumerate(zip(mesh.nodes, U))]
    write_table(path, meta, ["node", "x", "y", "u1", "u2"], rows, footer, blocks)


def read_nodal_field(path):
    meta, blocks, footer = read_table(path)
    cols, arr = blocks["main"]
    return meta, arr[:, 3:5].ravel(), footer, blocks


def write_hom_tensor(path, H, extra=None):
    D = H.voigt
    labels = ["11", "22", "12"]
    out = [f"# geometry_hash={H.geometry_hash}", f"# normalization={H.normalization}",
           f"# y1_area={H.y1_area!r}"]
    for k, v in (extra or {}).items():
        out.append(f"# {k}={v}")
    out.append("voigt " + " ".join(labels))
    for lab, row in zip(labels, D):
        out.append(lab + " " + " ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(out) + "\n")


def read_hom_tensor(path):
    lines = Path(path).read_text().splitlines()
    meta = _parse_meta(lines)
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    D = np.array([[float(t) for t in ln.split()[1:]] for ln in body[1:4]])
    return D, meta
