"""Structured quadrilateral meshes of the unit cell and of the periodic macro domain.

Everything lives on the unit square.  The reference cell ``Y = (0,1)^2`` is
split into ``res x res`` bilinear elements, each tagged as inclusion (``Y1``)
or matrix (``Y2``).  The macro mesh of ``Omega = (0,1)^2`` with period
``eps = 1/n`` is the ``n x n`` tiling of that cell, so every macro element
knows the cell it belongs to and its position inside the reference cell.

Node numbering is row-major, ``node(i, j) = j * (m + 1) + i`` with ``i``
running along ``x``.  Element ``(i, j)`` has index ``j * m + i`` and
counter-clockwise connectivity starting at its lower-left node.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import GeometryError, MeshError

Y1 = 1
Y2 = 2
INCLUSION = Y1
MATRIX = Y2

SHAPES = ("disk", "square", "none")
FACES = ("left", "right", "bottom", "top")


def _grid(m):
    """Nodes and connectivity of an ``m x m`` grid on the unit square."""
    ii, jj = np.meshgrid(np.arange(m + 1), np.arange(m + 1))
    nodes = np.column_stack([ii.ravel() / m, jj.ravel() / m])
    ei, ej = np.meshgrid(np.arange(m), np.arange(m))
    ei, ej = ei.ravel(), ej.ravel()
    n0 = ej * (m + 1) + ei
    elements = np.column_stack([n0, n0 + 1, n0 + m + 2, n0 + m + 1])
    return nodes, elements


def face_nodes(m, face):
    """Indices of the nodes of an ``m x m`` grid lying on one face of the square."""
    idx = np.arange(m + 1)
    if face == "left":
        return idx * (m + 1)
    if face == "right":
        return idx * (m + 1) + m
    if face == "bottom":
        return idx
    if face == "top":
        return m * (m + 1) + idx
    raise MeshError(f"unknown face {face!r}; expected one of {FACES}")


@dataclass(frozen=True)
class CellGeometry:
    """Inclusion centred at (0.5, 0.5) in the unit cell.

    ``size`` is the disk radius or the square half-width.  ``shape="none"``
    gives a homogeneous cell without inclusion.
    """

    shape: str
    size: float
    resolution: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise GeometryError(f"unknown inclusion shape {self.shape!r}")
        r = self.resolution
        if r < 1 or r & (r - 1):
            raise GeometryError(f"resolution must be a power of two, got {r}")
        if self.shape != "none" and not 0.0 < self.size < 0.5:
            raise GeometryError(f"inclusion size must lie in (0, 0.5), got {self.size}")

    @property
    def analytic_area(self):
        if self.shape == "disk":
            return np.pi * self.size**2
        if self.shape == "square":
            return (2.0 * self.size) ** 2
        return 0.0


@dataclass(frozen=True)
class PeriodicMap:
    """Identification of opposite faces of the cell mesh.

    ``master[i]`` is the node that node ``i`` is glued to (itself for interior
    nodes and masters); ``reduced[i]`` numbers the distinct masters.
    """

    master: np.ndarray
    reduced: np.ndarray
    n_reduced: int

    def dof_map(self):
        """Reduced vector DOF index of every interleaved nodal DOF."""
        return np.column_stack([2 * self.reduced, 2 * self.reduced + 1]).ravel()


@dataclass(frozen=True, eq=False)
class CellMesh:
    geometry: CellGeometry
    nodes: np.ndarray
    elements: np.ndarray
    region: np.ndarray
    periodic: PeriodicMap
    interface_nodes: np.ndarray

    @property
    def resolution(self):
        return self.geometry.resolution

    @property
    def h(self):
        return 1.0 / self.geometry.resolution

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elements(self):
        return len(self.elements)

    @cached_property
    def y1_elements(self):
        return np.flatnonzero(self.region == Y1)

    @cached_property
    def y2_elements(self):
        return np.flatnonzero(self.region == Y2)

    @cached_property
    def y1_nodes(self):
        """Nodes of Y1 elements, interface included."""
        return np.unique(self.elements[self.y1_elements])

    @cached_property
    def y2_nodes(self):
        return np.unique(self.elements[self.y2_elements])

    @cached_property
    def y1_interior_nodes(self):
        """Nodes touching only Y1 elements; the support of fields vanishing on Y2."""
        return np.setdiff1d(self.y1_nodes, self.y2_nodes)

    def area(self, tag):
        return np.count_nonzero(self.region == tag) * self.h**2

    @cached_property
    def geometry_hash(self):
        g = self.geometry
        h = hashlib.sha256(f"{g.shape}:{g.size!r}:{g.resolution}".encode())
        h.update(self.region.astype(np.int8).tobytes())
        return h.hexdigest()[:16]


def _region_tags(geom):
    r = geom.resolution
    c = (np.arange(r) + 0.5) / r - 0.5
    cx, cy = np.meshgrid(c, c)
    if geom.shape == "disk":
        inside = cx**2 + cy**2 < geom.size**2
    elif geom.shape == "square":
        inside = np.maximum(np.abs(cx), np.abs(cy)) < geom.size
    else:
        inside = np.zeros_like(cx, dtype=bool)
    return np.where(inside.ravel(), Y1, Y2).astype(np.int8)


def _connected(mask, periodic):
    """Edge-connectivity of the True cells of a square boolean grid."""
    todo = list(zip(*np.nonzero(mask)))
    if not todo:
        return True
    r = mask.shape[0]
    seen = {todo[0]}
    stack = [todo[0]]
    while stack:
        j, i = stack.pop()
        for dj, di in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            jj, ii = j + dj, i + di
            if periodic:
                jj, ii = jj % r, ii % r
            elif not (0 <= jj < r and 0 <= ii < r):
                continue
            if mask[jj, ii] and (jj, ii) not in seen:
                seen.add((jj, ii))
                stack.append((jj, ii))
    return len(seen) == len(todo)


def periodic_pairing(cell):
    """Glue opposite faces of a structured cell mesh.

    All four corners collapse onto node 0, every other node on the right or
    top face onto its partner on the left or bottom face.
    """
    r = cell.resolution
    nodes = cell.nodes
    idx = np.arange((r + 1) ** 2)
    i, j = idx % (r + 1), idx // (r + 1)
    master = (j % r) * (r + 1) + (i % r)
    shift = nodes - nodes[master]
    if not np.all(np.isin(np.round(shift, 12), (0.0, 1.0))):
        raise MeshError("opposite cell faces do not match")
    masters = np.unique(master)
    reduced = np.searchsorted(masters, master)
    return PeriodicMap(master=master, reduced=reduced, n_reduced=len(masters))


def build_cell_mesh(geom):
    """Mesh the unit cell, classify elements by centroid and pair its faces."""
    r = geom.resolution
    if geom.shape != "none" and not geom.size < 0.5 - 1.0 / r:
        raise GeometryError(
            f"{geom.shape} of size {geom.size} leaves no one-element band to the "
            f"cell boundary at resolution {r}"
        )
    nodes, elements = _grid(r)
    region = _region_tags(geom)
    grid = (region == Y2).reshape(r, r)
    if not _connected(grid, periodic=True):
        raise GeometryError("discrete matrix region Y2 is disconnected")
    if geom.shape != "none":
        if not np.any(region == Y1):
            raise GeometryError("inclusion is smaller than one element at this resolution")
        if not _connected(~grid, periodic=False):
            raise GeometryError("discrete inclusion Y1 is disconnected")
    n1 = np.unique(elements[region == Y1])
    n2 = np.unique(elements[region == Y2])
    interface = np.intersect1d(n1, n2)
    placeholder = PeriodicMap(np.arange(len(nodes)), np.arange(len(nodes)), len(nodes))
    cell = CellMesh(geom, nodes, elements, region, placeholder, interface)
    object.__setattr__(cell, "periodic", periodic_pairing(cell))
    return cell


@dataclass(frozen=True, eq=False)
class QuadGrid:
    """Plain ``m x m`` grid of the unit square, used for the limit macro problem."""

    m: int
    nodes: np.ndarray
    elements: np.ndarray
    gamma0: tuple = ("left",)

    @property
    def h(self):
        return 1.0 / self.m

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elements(self):
        return len(self.elements)

    @cached_property
    def gamma0_nodes(self):
        return np.unique(np.concatenate([face_nodes(self.m, f) for f in self.gamma0]))

    @cached_property
    def constrained_dofs(self):
        g = self.gamma0_nodes
        return np.column_stack([2 * g, 2 * g + 1]).ravel()

    def locate(self, x):
        """Element index and local coordinates in [0,1]^2 of points ``x``."""
        m = self.m
        s = np.asarray(x) * m
        ij = np.clip(np.floor(s).astype(int), 0, m - 1)
        local = s - ij
        return ij[:, 1] * m + ij[:, 0], local


def build_grid(m, gamma0=("left",)):
    if m < 1:
        raise MeshError(f"grid size must be positive, got {m}")
    _check_faces(gamma0)
    nodes, elements = _grid(m)
    return QuadGrid(m, nodes, elements, tuple(gamma0))


def _check_faces(faces):
    if not faces:
        raise MeshError("Gamma0 must contain at least one face")
    for f in faces:
        if f not in FACES:
            raise MeshError(f"unknown face {f!r}; expected one of {FACES}")


@dataclass(frozen=True, eq=False)
class MacroMesh(QuadGrid):
    """eps-periodic tiling of the unit square by ``n x n`` copies of a cell mesh."""

    n: int = 1
    cell: CellMesh = None
    region: np.ndarray = None
    cell_index: np.ndarray = None
    local_element: np.ndarray = None
    unfold_index: np.ndarray = field(default=None, repr=False)

    @property
    def epsilon(self):
        return 1.0 / self.n

    @property
    def dim(self):
        return 2

    @cached_property
    def inclusion_elements(self):
        return np.flatnonzero(self.region == INCLUSION)

    @cached_property
    def inclusion_nodes(self):
        return np.unique(self.elements[self.inclusion_elements])

    @cached_property
    def inclusion_dofs(self):
        g = self.inclusion_nodes
        return np.column_stack([2 * g, 2 * g + 1]).ravel()

    @cached_property
    def gamma1_nodes(self):
        m = self.m
        boundary = np.unique(np.concatenate([face_nodes(m, f) for f in FACES]))
        return np.setdiff1d(boundary, self.gamma0_nodes)

    def area(self, tag):
        return np.count_nonzero(self.region == tag) * self.h**2


def build_macro_mesh(cell, n, gamma0=("left",)):
    """Tile the unit square with ``n x n`` scaled copies of ``cell``."""
    if n < 1:
        raise MeshError(f"number of cells per side must be positive, got {n}")
    _check_faces(gamma0)
    r = cell.resolution
    m = n * r
    nodes, elements = _grid(m)
    ei, ej = np.arange(m * m) % m, np.arange(m * m) // m
    local = (ej % r) * r + (ei % r)
    cell_index = (ej // r) * n + (ei // r)
    region = cell.region[local]

    k1, k2 = np.arange(n * n) % n, np.arange(n * n) // n
    ci, cj = np.arange((r + 1) ** 2) % (r + 1), np.arange((r + 1) ** 2) // (r + 1)
    unfold = (k2[:, None] * r + cj[None, :]) * (m + 1) + (k1[:, None] * r + ci[None, :])

    return MacroMesh(
        m=m,
        nodes=nodes,
        elements=elements,
        gamma0=tuple(gamma0),
        n=n,
        cell=cell,
        region=region,
        cell_index=cell_index,
        local_element=local,
        unfold_index=unfold,
    )
