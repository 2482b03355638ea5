"""Periodic cell problems on the matrix part of the cell and the effective tensor.

For each unit strain ``M^kl`` the corrector ``chi_kl`` is periodic on ``Y``,
lives on the matrix ``Y2`` and solves

    int_{Y2} A (M^kl + e(chi_kl)) : e(w) = 0   for all periodic w on Y2,

normalized by zero mean over ``Y2``.  The effective tensor is
``Ahom_ijkl = int_{Y2} A (M^kl + e(chi_kl)) : M^ij``.

The module also builds the inclusion operator of the soft phase, acting on
fields that vanish on ``Y2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import cho_factor, cho_solve

from .errors import GeometryError, ValidationError
from .fem import HookeTensor, assemble, _MANDEL
from .geometry import INCLUSION, MATRIX

# Voigt order of the symmetric index pairs and their unit strains (engineering shear)
PAIRS = ((0, 0), (1, 1), (0, 1))
_PAIR_INDEX = {(0, 0): 0, (1, 1): 1, (0, 1): 2, (1, 0): 2}


def unit_strain(ij):
    i, j = ij
    M = np.zeros((2, 2))
    M[i, j] += 0.5
    M[j, i] += 0.5
    return M


def affine_field(nodes, M):
    """Nodal values of ``y -> M y`` (exact in the bilinear space)."""
    return (nodes @ M.T).ravel()


@dataclass(frozen=True, eq=False)
class CorrectorSet:
    """Correctors for the three unit strains, as full nodal fields on the cell mesh."""

    chi: dict
    cell: object
    A: HookeTensor
    normalization: str

    def __getitem__(self, ij):
        return self.chi[PAIRS[_PAIR_INDEX[tuple(ij)]]]


@dataclass(frozen=True, eq=False)
class HomogenizedTensor:
    """Effective tensor with its unsymmetrized four-index values and provenance."""

    tensor: HookeTensor
    full: np.ndarray
    energy_voigt: np.ndarray
    geometry_hash: str
    normalization: str = "zero-mean"
    y1_area: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def voigt(self):
        return self.tensor.voigt


class _CellSystem:
    """Periodic, Y2-restricted stiffness and the maps between full and reduced DOFs."""

    def __init__(self, cell, A):
        if cell.y2_elements.size == 0:
            raise GeometryError("cell has no matrix elements")
        self.cell = cell
        self.K = assemble(cell, A, "stiffness", tag=MATRIX, constrained=[]).matrix
        self.M = assemble(cell, None, "mass_on_region", tag=MATRIX, constrained=[]).matrix
        pm = cell.periodic
        n_full = 2 * cell.n_nodes
        dmap = pm.dof_map()
        active_nodes = np.unique(pm.reduced[cell.y2_nodes])
        active = np.column_stack([2 * active_nodes, 2 * active_nodes + 1]).ravel()
        col = -np.ones(2 * pm.n_reduced, dtype=int)
        col[active] = np.arange(len(active))
        keep = col[dmap] >= 0
        rows = np.flatnonzero(keep)
        self.P = sp.csr_matrix((np.ones(len(rows)), (rows, col[dmap][keep])),
                               shape=(n_full, len(active)))
        self.Kr = (self.P.T @ self.K @ self.P).tocsc()
        self.Kr = ((self.Kr + self.Kr.T) * 0.5).tocsc()
        ones = np.zeros((n_full, 2))
        ones[0::2, 0] = 1.0
        ones[1::2, 1] = 1.0
        self.Q = self.P.T @ (self.M @ ones)

    def loads(self):
        nodes = self.cell.nodes
        U = np.column_stack([affine_field(nodes, unit_strain(ij)) for ij in PAIRS])
        return U, -(self.P.T @ (self.K @ U))

    def solve(self, rhs, normalization="zero-mean"):
        n = self.Kr.shape[0]
        if normalization == "zero-mean":
            S = sp.bmat([[self.Kr, sp.csc_matrix(self.Q)],
                         [sp.csc_matrix(self.Q.T), None]], format="csc")
            b = np.vstack([rhs, np.zeros((2, rhs.shape[1]))])
            x = spla.splu(S).solve(b)[:n]
        elif normalization == "pin":
            keep = np.arange(2, n)
            lu = spla.splu(self.Kr[keep][:, keep].tocsc())
            x = np.zeros_like(rhs)
            x[keep] = lu.solve(rhs[keep])
        else:
            raise ValidationError(f"unknown normalization {normalization!r}")
        return self.P @ x


def solve_correctors(cell, A, normalization="zero-mean"):
    """All three correctors from one factorization."""
    sys_ = _CellSystem(cell, A)
    _, F = sys_.loads()
    X = sys_.solve(F, normalization)
    chi = {ij: X[:, k] for k, ij in enumerate(PAIRS)}
    return CorrectorSet(chi, cell, A, normalization)


def solve_cell_corrector(cell, A, ij):
    """Corrector of the unit strain ``M^ij``; ``ij`` uses 0-based indices."""
    return solve_correctors(cell, A)[ij]


def corrector_residual(cell, A, correctors, tests):
    """``int_{Y2} A (M + e(chi)) : e(w)`` for periodic test fields, relative to the energy."""
    sys_ = _CellSystem(cell, A)
    U, _ = sys_.loads()
    out = []
    for k, ij in enumerate(PAIRS):
        z = U[:, k] + correctors[ij]
        flux = sys_.K @ z
        scale = np.sqrt(max(z @ flux, 0.0))
        for w in tests:
            wn = np.sqrt(max(w @ (sys_.K @ w), 0.0))
            out.append(abs(w @ flux) / (scale * wn) if wn > 0 else 0.0)
    return np.array(out)


def periodic_test_fields(cell, count, rng):
    """Random periodic nodal fields (slave values copied from masters)."""
    pm = cell.periodic
    out = []
    for _ in range(count):
        r = rng.standard_normal(2 * pm.n_reduced)
        out.append(r[pm.dof_map()])
    return out


def homogenized_tensor(correctors, cell=None, A=None):
    """Flux-form effective tensor, with the energy form kept for comparison."""
    cell = correctors.cell if cell is None else cell
    A = correctors.A if A is None else A
    K = assemble(cell, A, "stiffness", tag=MATRIX, constrained=[]).matrix
    nodes = cell.nodes
    U = np.column_stack([affine_field(nodes, unit_strain(ij)) for ij in PAIRS])
    Z = U + np.column_stack([correctors[ij] for ij in PAIRS])
    flux = U.T @ (K @ Z)
    energy = Z.T @ (K @ Z)
    full = np.zeros((2, 2, 2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                for l in range(2):
                    full[i, j, k, l] = flux[_PAIR_INDEX[(i, j)], _PAIR_INDEX[(k, l)]]
    tensor = HookeTensor(0.5 * (flux + flux.T))
    return HomogenizedTensor(tensor, full, energy, cell.geometry_hash,
                             correctors.normalization, cell.area(INCLUSION),
                             {"flux_voigt": flux})


def compute_hom_tensor(cell, A, normalization="zero-mean"):
    return homogenized_tensor(solve_correctors(cell, A, normalization), cell, A)


@dataclass(frozen=True)
class HomTensorReport:
    minor_residual: float
    major_residual: float
    voigt_eigenvalues: np.ndarray
    C1: float
    passed: bool


def validate_hom_tensor(Ahom, tol=1e-10):
    """Check symmetries and ellipticity; raise listing the first failing entry."""
    full = Ahom.full if isinstance(Ahom, HomogenizedTensor) else np.asarray(Ahom, float)
    if full.shape == (3, 3):
        full = HookeTensor(full).full()
    scale = np.abs(full).max()
    if scale == 0:
        raise ValidationError("tensor vanishes identically")
    minor = np.abs(full - full.transpose(1, 0, 2, 3)).max() / scale
    major = np.abs(full - full.transpose(2, 3, 0, 1)).max() / scale
    minor2 = np.abs(full - full.transpose(0, 1, 3, 2)).max() / scale
    for name, perm, res in (("A_ijkl = A_jikl", (1, 0, 2, 3), minor),
                            ("A_ijkl = A_ijlk", (0, 1, 3, 2), minor2),
                            ("A_ijkl = A_klij", (2, 3, 0, 1), major)):
        if res > tol:
            diff = np.abs(full - full.transpose(perm))
            idx = tuple(int(t) + 1 for t in np.unravel_index(np.argmax(diff), diff.shape))
            raise ValidationError(
                f"symmetry {name} fails at entry A_{''.join(map(str, idx))}: "
                f"relative mismatch {res:.3e}")
    D = HookeTensor.from_full(full).voigt
    D = 0.5 * (D + D.T)
    eig = np.linalg.eigvalsh(D)
    if eig[0] <= 0:
        raise ValidationError(f"Voigt matrix not positive definite, eigenvalues {eig}")
    C1 = float(np.linalg.eigvalsh(_MANDEL @ D @ _MANDEL)[0])
    return HomTensorReport(max(minor, minor2), major, eig, C1, True)


class InclusionCellOperator:
    """``K_Y1 + (alpha s^p / kappa^2) M_Y1`` on fields vanishing on Y2.

    The unknowns are the nodes touching only inclusion elements; the
    interface nodes carry zero.  Factorizations are cached per amplitude.
    """

    def __init__(self, cell, A):
        if cell.y1_elements.size == 0:
            raise GeometryError("cell has no inclusion elements")
        self.cell = cell
        nodes = cell.y1_interior_nodes
        self.nodes = nodes
        self.dofs = np.column_stack([2 * nodes, 2 * nodes + 1]).ravel()
        K = assemble(cell, A, "stiffness", tag=INCLUSION, constrained=[]).matrix
        M = assemble(cell, None, "mass_on_region", tag=INCLUSION, constrained=[]).matrix
        d = self.dofs
        self.K = K[d][:, d].toarray()
        self.M = M[d][:, d].toarray()
        self.M_full = M
        self._cache = {}

    def coefficient(self, s, kappa, alpha, p):
        if s < 0:
            raise ValidationError(f"amplitude must be nonnegative, got {s}")
        if not np.isfinite(kappa) or kappa <= 0:
            raise ValidationError("inclusion operator needs a finite positive kappa")
        return alpha * s**p / kappa**2

    def matrix(self, s, kappa, alpha, p):
        return self.K + self.coefficient(s, kappa, alpha, p) * self.M

    def factor(self, s, kappa, alpha, p):
        key = (round(float(s), 12), float(kappa), float(alpha), float(p))
        if key not in self._cache:
            self._cache[key] = cho_factor(self.matrix(s, kappa, alpha, p))
        return self._cache[key]

    def solve(self, rhs, s, kappa, alpha, p):
        if self.dofs.size == 0:
            return np.zeros_like(rhs)
        return cho_solve(self.factor(s, kappa, alpha, p), rhs)

    def extend(self, w):
        """Full nodal cell field from values on the unknowns."""
        out = np.zeros(2 * self.cell.n_nodes)
        out[self.dofs] = w
        return out


def inclusion_cell_operator(cell, A, s, kappa, alpha, p):
    """Inclusion operator evaluated at one amplitude, as a dense SPD matrix plus solver."""
    op = InclusionCellOperator(cell, A)
    op.coefficient(s, kappa, alpha, p)
    return op
