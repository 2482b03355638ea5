"""Bilinear finite elements for plane linear elasticity.

Vector fields are stored DOF-interleaved, ``[u1(node0), u2(node0), u1(node1), ...]``.
Hooke tensors are handled through their 3x3 Voigt matrix with engineering
shear, so that ``sigma_v = D @ eps_v`` with ``eps_v = (e11, e22, 2 e12)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AssemblyError, SolverError, ValidationError
from .geometry import INCLUSION, MATRIX

# 2x2 Gauss rule on the reference square [0,1]^2
_G = 0.5 + np.array([-0.5, 0.5]) / np.sqrt(3.0)
GAUSS_POINTS = np.array([[a, b] for b in _G for a in _G])
GAUSS_WEIGHTS = np.full(4, 0.25)

_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])

# e:e = eps_v^T STRAIN_GRAM eps_v for engineering shear
STRAIN_GRAM = np.diag([1.0, 1.0, 0.5])
_VOIGT_PAIRS = ((0, 0), (1, 1), (0, 1))
_MANDEL = np.diag([1.0, 1.0, np.sqrt(2.0)])


def shape_functions(xi):
    """Bilinear shape functions and their reference gradients at points ``xi``."""
    xi = np.atleast_2d(xi)
    x, y = xi[:, 0], xi[:, 1]
    N = np.column_stack([(1 - x) * (1 - y), x * (1 - y), x * y, (1 - x) * y])
    dx = np.column_stack([-(1 - y), 1 - y, y, -y])
    dy = np.column_stack([-(1 - x), -x, x, 1 - x])
    return N, np.stack([dx, dy], axis=1)


def _strain_matrix(dN):
    """3x8 strain-displacement matrix from physical gradients ``dN`` (2x4)."""
    B = np.zeros((3, 8))
    B[0, 0::2] = dN[0]
    B[1, 1::2] = dN[1]
    B[2, 0::2] = dN[1]
    B[2, 1::2] = dN[0]
    return B


def _element_kinematics(coords):
    """Strain matrices, shape values and quadrature weights times |J| for one element."""
    coords = np.asarray(coords, dtype=float)
    if coords.shape != (4, 2):
        raise AssemblyError(f"expected 4x2 element coordinates, got {coords.shape}")
    N, dN = shape_functions(GAUSS_POINTS)
    Bs, wts = [], []
    for q in range(len(GAUSS_POINTS)):
        J = dN[q] @ coords
        det = np.linalg.det(J)
        if not det > 1e-14 * max(1.0, np.abs(coords).max() ** 2):
            raise AssemblyError("degenerate or inverted element")
        Bs.append(_strain_matrix(np.linalg.solve(J, dN[q])))
        wts.append(GAUSS_WEIGHTS[q] * det)
    return np.array(Bs), N, np.array(wts)


def element_stiffness(D, coords=_CORNERS):
    """Element stiffness ``int B^T D B`` of a bilinear quadrilateral."""
    D = D.voigt if isinstance(D, HookeTensor) else np.asarray(D, dtype=float)
    B, _, w = _element_kinematics(coords)
    K = np.einsum("q,qia,ij,qjb->ab", w, B, D, B)
    return 0.5 * (K + K.T)


def element_mass(coords=_CORNERS):
    """Consistent vector mass matrix of a bilinear quadrilateral (exact under 2x2 Gauss)."""
    _, N, w = _element_kinematics(coords)
    m = np.einsum("q,qa,qb->ab", w, N, N)
    M = np.zeros((8, 8))
    M[0::2, 0::2] = m
    M[1::2, 1::2] = m
    return M


def _strain_pair_gram(h):
    """``G[a, b] = int B_a^T (.) B_b`` as an 8x8x3x3 array for a square of side h."""
    B, _, w = _element_kinematics(_CORNERS * h)
    return np.einsum("q,qia,qjb->abij", w, B, B)


@dataclass(frozen=True)
class HookeTensor:
    """Symmetric elasticity tensor stored as a 3x3 Voigt matrix (engineering shear)."""

    voigt: np.ndarray

    def __post_init__(self):
        D = np.asarray(self.voigt, dtype=float)
        if D.shape != (3, 3):
            raise ValidationError(f"Voigt matrix must be 3x3, got {D.shape}")
        object.__setattr__(self, "voigt", D)

    @classmethod
    def isotropic(cls, lam=1.0, mu=1.0):
        return cls(
            np.array([[lam + 2 * mu, lam, 0.0], [lam, lam + 2 * mu, 0.0], [0.0, 0.0, mu]])
        )

    @classmethod
    def parse(cls, text):
        """Parse ``iso:lambda=1,mu=1`` or ``voigt:d11,d12,d13,d22,d23,d33``."""
        kind, _, rest = text.partition(":")
        if kind == "iso":
            kw = {"lambda": 1.0, "mu": 1.0}
            for item in filter(None, rest.split(",")):
                k, _, v = item.partition("=")
                if k.strip() not in kw:
                    raise ValidationError(f"unknown isotropic parameter {k!r}")
                kw[k.strip()] = float(v)
            return cls.isotropic(kw["lambda"], kw["mu"])
        if kind == "voigt":
            v = [float(t) for t in rest.split(",")]
            if len(v) != 6:
                raise ValidationError("voigt needs the 6 upper-triangular entries")
            D = np.zeros((3, 3))
            D[np.triu_indices(3)] = v
            return cls(D + np.triu(D, 1).T)
        raise ValidationError(f"cannot parse Hooke tensor {text!r}")

    def full(self):
        """Four-index array A[i, j, k, l]."""
        A = np.zeros((2, 2, 2, 2))
        for I, (i, j) in enumerate(_VOIGT_PAIRS):
            for J, (k, l) in enumerate(_VOIGT_PAIRS):
                for a, b in {(i, j), (j, i)}:
                    for c, d in {(k, l), (l, k)}:
                        A[a, b, c, d] = self.voigt[I, J]
        return A

    @classmethod
    def from_full(cls, A):
        D = np.array([[A[i, j, k, l] for (k, l) in _VOIGT_PAIRS] for (i, j) in _VOIGT_PAIRS])
        return cls(D)

    def coercivity(self):
        """Smallest eigenvalue of the tensor as a map on symmetric matrices (Frobenius norm)."""
        return float(np.linalg.eigvalsh(_MANDEL @ self.voigt @ _MANDEL)[0])

    def validate(self, tol=1e-12):
        D = self.voigt
        if np.abs(D - D.T).max() > tol * max(1.0, np.abs(D).max()):
            raise ValidationError("Hooke tensor lacks major symmetry")
        if self.coercivity() <= 0:
            raise ValidationError("Hooke tensor is not coercive")
        return self


@dataclass(frozen=True)
class ContrastField:
    """``delta^2 A`` on inclusion elements, ``A`` on matrix elements."""

    A: HookeTensor
    delta: float

    def __post_init__(self):
        if not 0.0 < self.delta <= 1.0:
            raise ValidationError(f"contrast delta must lie in (0, 1], got {self.delta}")

    def element_scale(self, region):
        region = np.asarray(region)
        if not np.all(np.isin(region, (INCLUSION, MATRIX))):
            raise AssemblyError("region tags must be inclusion or matrix")
        return np.where(region == INCLUSION, self.delta**2, 1.0)


@dataclass(eq=False)
class SparseOperator:
    """Symmetric sparse matrix plus the DOFs held at zero."""

    matrix: sp.csr_matrix
    constrained: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix)
        n = self.matrix.shape[0]
        self.constrained = np.unique(np.asarray(self.constrained, dtype=int))
        mask = np.ones(n, dtype=bool)
        mask[self.constrained] = False
        self.free = np.flatnonzero(mask)
        self._reduced = None
        self._lu = None

    @property
    def shape(self):
        return self.matrix.shape

    def reduced(self):
        if self._reduced is None:
            self._reduced = self.matrix[self.free][:, self.free].tocsc()
        return self._reduced

    def factor(self):
        if self._lu is None:
            # symmetric ordering roughly halves fill for these SPD systems
            self._lu = spla.splu(self.reduced(), permc_spec="MMD_AT_PLUS_A",
                                 options={"SymmetricMode": True})
        return self._lu

    def plus(self, c, other):
        """New operator ``self + c * other`` with the same constraints."""
        other = other.matrix if isinstance(other, SparseOperator) else other
        if c == 0:
            return SparseOperator(self.matrix, self.constrained)
        return SparseOperator(self.matrix + c * other, self.constrained)

    def __matmul__(self, x):
        return self.matrix @ x

    def to_dense(self):
        return self.matrix.toarray()


def _dof_table(elements):
    return np.stack([2 * elements, 2 * elements + 1], axis=2).reshape(len(elements), 8)


def _scatter(elements, Ke, n_dofs):
    dofs = _dof_table(elements)
    rows = np.repeat(dofs, 8, axis=1).ravel()
    cols = np.tile(dofs, (1, 8)).ravel()
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n_dofs, n_dofs)).tocsr()
    K.sum_duplicates()
    return ((K + K.T) * 0.5).tocsr()


def assemble(mesh, coeff=None, form="stiffness", tag=None, elements=None, constrained=None):
    """Assemble a global operator on a structured mesh.

    ``form`` is ``stiffness``, ``mass``, ``mass_on_region`` or ``strain_gram``
    (the Gram matrix of ``int e(u):e(w)``).  ``tag`` restricts the integration
    to elements of one region; ``elements`` restricts it to an explicit list.
    """
    n_dofs = 2 * len(mesh.nodes)
    sel = np.arange(len(mesh.elements)) if elements is None else np.asarray(elements)
    if tag is not None:
        region = getattr(mesh, "region", None)
        if region is None:
            raise AssemblyError("mesh carries no region tags")
        if tag not in (INCLUSION, MATRIX):
            raise AssemblyError(f"unknown region tag {tag!r}")
        sel = sel[region[sel] == tag]
    elif form == "mass_on_region":
        raise AssemblyError("mass_on_region needs a tag")
    h = mesh.h
    if form in ("mass", "mass_on_region"):
        Ke = np.broadcast_to(element_mass(_CORNERS * h), (len(sel), 8, 8))
    elif form == "strain_gram":
        Ke = np.broadcast_to(element_stiffness(STRAIN_GRAM, _CORNERS * h), (len(sel), 8, 8))
    elif form == "stiffness":
        if isinstance(coeff, ContrastField):
            region = getattr(mesh, "region", None)
            if region is None:
                raise AssemblyError("contrast field needs a mesh with region tags")
            scale = coeff.element_scale(region[sel])
            base = element_stiffness(coeff.A.voigt, _CORNERS * h)
            Ke = scale[:, None, None] * base[None]
        elif isinstance(coeff, HookeTensor):
            base = element_stiffness(coeff.voigt, _CORNERS * h)
            Ke = np.broadcast_to(base, (len(sel), 8, 8))
        else:
            D = np.asarray(coeff, dtype=float)
            if D.shape != (len(sel), 3, 3):
                raise AssemblyError("per-element coefficients must have shape (n_elements, 3, 3)")
            Ke = np.einsum("eij,abij->eab", D, _strain_pair_gram(h))
            Ke = 0.5 * (Ke + Ke.transpose(0, 2, 1))
    else:
        raise AssemblyError(f"unknown form {form!r}")
    K = _scatter(mesh.elements[sel], np.ascontiguousarray(Ke), n_dofs)
    if constrained is None:
        constrained = getattr(mesh, "constrained_dofs", np.zeros(0, dtype=int))
    return SparseOperator(K, constrained)


def _solve_direct(op, r, b, c, tol):
    lu = op.factor()
    x = lu.solve(r)
    if b is not None and c != 0:
        y = lu.solve(b)
        x = x - (c * (b @ x) / (1.0 + c * (b @ y))) * y
    return x


def _apply(A, b, c):
    if b is None or c == 0:
        return lambda x: A @ x
    return lambda x: A @ x + c * (b @ x) * b


def _block_preconditioner(A):
    """Inverse of the 2x2 nodal diagonal blocks (DOF pairs 2k, 2k+1 assumed adjacent)."""
    n = A.shape[0]
    if n % 2:
        return None
    d = A.diagonal()
    off = np.asarray(A[np.arange(0, n, 2), np.arange(1, n, 2)]).ravel()
    a, cc = d[0::2], d[1::2]
    det = a * cc - off**2
    inv = np.empty((n // 2, 2, 2))
    inv[:, 0, 0] = cc / det
    inv[:, 1, 1] = a / det
    inv[:, 0, 1] = inv[:, 1, 0] = -off / det
    k = n // 2
    return sp.bsr_matrix((inv, np.arange(k), np.arange(k + 1)), shape=(n, n)).tocsr()


def solve_spd(op, rhs, rank_one=None, *, tol=1e-10, method="direct",
              preconditioner="jacobi", maxiter=None):
    """Solve ``(op + c b b^T) x = rhs`` with the constrained DOFs of ``op`` held at zero.

    The rank-one term is never formed: the direct path uses the
    Sherman-Morrison formula on a cached factorization, the CG path applies it
    inside the matrix-vector product.
    """
    if not isinstance(op, SparseOperator):
        op = SparseOperator(op)
    rhs = np.asarray(rhs, dtype=float)
    n = op.shape[0]
    if rhs.shape != (n,):
        raise SolverError(f"right-hand side has shape {rhs.shape}, expected ({n},)")
    b, c = (None, 0.0) if rank_one is None else (np.asarray(rank_one[0], float), float(rank_one[1]))
    if c < 0:
        raise SolverError("rank-one coefficient must be nonnegative")
    free = op.free
    r = rhs[free]
    bf = None if b is None else b[free]
    x = np.zeros(n)
    rnorm = np.linalg.norm(r)
    if rnorm == 0.0:
        return x
    A = op.reduced()
    apply = _apply(A, bf, c)
    if method == "direct":
        xf = _solve_direct(op, r, bf, c, tol)
        res = np.linalg.norm(apply(xf) - r)
        if res > tol * rnorm:
            # one step of iterative refinement
            xf = xf + _solve_direct(op, r - apply(xf), bf, c, tol)
            res = np.linalg.norm(apply(xf) - r)
    elif method == "cg":
        if preconditioner == "block":
            P = _block_preconditioner(A)
        else:
            P = None
        if P is None:
            d = A.diagonal() + (0.0 if bf is None else c * bf**2)
            P = sp.diags(1.0 / d)
        L = spla.LinearOperator(A.shape, matvec=apply, dtype=float)
        xf, info = spla.cg(L, r, rtol=0.1 * tol, atol=0.0, M=P,
                           maxiter=maxiter or 20 * len(r))
        res = np.linalg.norm(apply(xf) - r)
        if info > 0 and res > tol * rnorm:
            raise SolverError(f"CG did not converge in {info} iterations", residual=res / rnorm)
    else:
        raise SolverError(f"unknown method {method!r}")
    if res > tol * rnorm:
        raise SolverError("linear solve missed its residual tolerance", residual=res / rnorm)
    x[free] = xf
    return x


class MacroOperators:
    """Operators of one macro mesh, assembled once and reused across solves."""

    def __init__(self, mesh, A):
        self.mesh = mesh
        self.A = A
        self.K_incl = assemble(mesh, A, "stiffness", tag=INCLUSION)
        self.K_mat = assemble(mesh, A, "stiffness", tag=MATRIX)
        self.M = assemble(mesh, None, "mass")
        self.M_incl = assemble(mesh, None, "mass_on_region", tag=INCLUSION)
        self.S_incl = assemble(mesh, None, "strain_gram", tag=INCLUSION)
        self.S_mat = assemble(mesh, None, "strain_gram", tag=MATRIX)
        self._stiff = {}

    def stiffness(self, delta):
        """Contrast stiffness ``delta^2 K_incl + K_mat`` with Gamma0 eliminated."""
        key = float(delta)
        if key not in self._stiff:
            K = key**2 * self.K_incl.matrix + self.K_mat.matrix
            self._stiff[key] = SparseOperator(K, self.mesh.constrained_dofs)
        return self._stiff[key]

    def l2(self, u):
        return float(np.sqrt(max(u @ (self.M @ u), 0.0)))

    def strain_norm(self, u, tag):
        S = self.S_incl if tag == INCLUSION else self.S_mat
        return float(np.sqrt(max(u @ (S @ u), 0.0)))


def korn_diagnostic(u, mesh, eps, delta=None, ops=None):
    """Ratio ``||u|| / (eps ||e(u)||_{Omega1} + ||e(u)||_{Omega2})``; zero for ``u = 0``.

    ``delta`` does not enter the ratio; it is accepted so that call sites can
    pass the full scaling pair.
    """
    u = np.asarray(u, dtype=float)
    if not np.any(u):
        return 0.0
    if ops is None:
        M = assemble(mesh, None, "mass")
        S1 = assemble(mesh, None, "strain_gram", tag=INCLUSION)
        S2 = assemble(mesh, None, "strain_gram", tag=MATRIX)
        l2 = np.sqrt(u @ (M @ u))
        e1, e2 = np.sqrt(max(u @ (S1 @ u), 0)), np.sqrt(max(u @ (S2 @ u), 0))
    else:
        l2 = ops.l2(u)
        e1, e2 = ops.strain_norm(u, INCLUSION), ops.strain_norm(u, MATRIX)
    denom = eps * e1 + e2
    if denom == 0.0:
        return float("inf")
    return float(l2 / denom)


def macro_operators(mesh, A):
    """Cached ``MacroOperators`` for ``(mesh, A)``, stored on the mesh instance."""
    cache = mesh.__dict__.setdefault("_operator_cache", {})
    key = A.voigt.tobytes()
    if key not in cache:
        cache[key] = MacroOperators(mesh, A)
    return cache[key]


def mass_operators(mesh):
    """Cached full and inclusion mass matrices of a macro mesh."""
    cache = mesh.__dict__.setdefault("_operator_cache", {})
    if "mass" not in cache:
        cache["mass"] = (assemble(mesh, None, "mass").matrix,
                         assemble(mesh, None, "mass_on_region", tag=INCLUSION).matrix)
    return cache["mass"]
