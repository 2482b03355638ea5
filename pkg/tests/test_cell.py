import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlhomog import oracles
from nlhomog.cell import (PAIRS, _CellSystem, affine_field, compute_hom_tensor,
                          corrector_residual, inclusion_cell_operator, periodic_test_fields,
                          solve_cell_corrector, solve_correctors, unit_strain,
                          validate_hom_tensor)
from nlhomog.errors import GeometryError, ValidationError
from nlhomog.fem import HookeTensor, assemble
from nlhomog.geometry import INCLUSION, MATRIX, CellGeometry, build_cell_mesh


def cell(shape, size, r):
    return build_cell_mesh(CellGeometry(shape, size, r))


def test_no_inclusion_gives_zero_corrector(iso):
    c = cell("none", 0.0, 8)
    for ij in PAIRS:
        assert np.abs(solve_cell_corrector(c, iso, ij)).max() < 1e-13
    H = compute_hom_tensor(c, iso)
    assert np.abs(H.voigt - iso.voigt).max() <= 1e-12


@settings(max_examples=15, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.1, 5.0))
def test_no_inclusion_reproduces_any_isotropic(lam, mu):
    A = HookeTensor.isotropic(lam, mu)
    H = compute_hom_tensor(cell("none", 0.0, 4), A)
    assert np.abs(H.voigt - A.voigt).max() <= 1e-12 * (1 + np.abs(A.voigt).max())


def test_corrector_symmetric_in_indices(iso, square8):
    chi = solve_correctors(square8, iso)
    assert chi[(0, 1)] is chi[(1, 0)]
    assert np.abs(chi[(0, 0)]).max() > 1e-3


def test_corrector_lowers_energy(iso, square8):
    sys_ = _CellSystem(square8, iso)
    U, _ = sys_.loads()
    chi = solve_correctors(square8, iso)
    for k, ij in enumerate(PAIRS):
        z = U[:, k] + chi[ij]
        assert z @ (sys_.K @ z) < U[:, k] @ (sys_.K @ U[:, k])


def test_corrector_galerkin_orthogonality(iso, square8, rng):
    chi = solve_correctors(square8, iso)
    res = corrector_residual(square8, iso, chi, periodic_test_fields(square8, 5, rng))
    assert res.max() <= 1e-10


def test_corrector_is_periodic(iso, square8):
    chi = solve_correctors(square8, iso)
    m = np.repeat(square8.periodic.master, 2) * 2 + np.tile([0, 1], square8.n_nodes)
    for ij in PAIRS:
        assert np.array_equal(chi[ij], chi[ij][m])


def test_corrector_matches_dense_pinned_solve(iso, tiny_cell):
    sys_ = _CellSystem(tiny_cell, iso)
    K = assemble(tiny_cell, iso, "stiffness", tag=MATRIX, constrained=[]).to_dense()
    P = sys_.P.toarray()
    Kr = P.T @ K @ P
    chi = solve_correctors(tiny_cell, iso)
    M2 = assemble(tiny_cell, None, "mass_on_region", tag=MATRIX, constrained=[]).to_dense()
    area = tiny_cell.area(MATRIX)
    for ij in PAIRS:
        U = affine_field(tiny_cell.nodes, unit_strain(ij))
        x = oracles.dense_solve(oracles.DenseSystem(Kr, -P.T @ K @ U, [0, 1]))
        z = P @ x
        for c in range(2):
            z[c::2] -= (M2 @ z)[c::2].sum() / area
        assert np.linalg.norm(z - chi[ij]) <= 1e-9 * np.linalg.norm(chi[ij])


def test_pin_and_mean_give_same_tensor(iso, square8):
    a = compute_hom_tensor(square8, iso, "zero-mean").voigt
    b = compute_hom_tensor(square8, iso, "pin").voigt
    assert np.abs(a - b).max() <= 1e-10 * np.abs(a).max()
    with pytest.raises(ValidationError):
        compute_hom_tensor(square8, iso, "free")


def test_flux_and_energy_forms_agree(iso, square8):
    H = compute_hom_tensor(square8, iso)
    assert np.abs(H.meta["flux_voigt"] - H.energy_voigt).max() <= 1e-10 * np.abs(H.voigt).max()


def test_square_bounds_and_refinement(iso):
    H16 = compute_hom_tensor(cell("square", 0.25, 16), iso).voigt
    H32 = compute_hom_tensor(cell("square", 0.25, 32), iso).voigt
    # Voigt upper bound |Y2| A in the Loewner order
    assert np.linalg.eigvalsh(0.75 * iso.voigt - H16)[0] > 0
    assert np.linalg.eigvalsh(0.75 * iso.voigt - H32)[0] > 0
    assert np.linalg.norm(H16 - H32) / np.linalg.norm(H32) <= 0.02
    # the coarser mesh is stiffer: conforming refinement lowers the energy
    assert np.linalg.eigvalsh(H16 - H32)[0] > -1e-12


def test_validate_no_inclusion_c1(iso):
    rep = validate_hom_tensor(compute_hom_tensor(cell("none", 0.0, 4), iso))
    assert rep.C1 == pytest.approx(iso.coercivity(), abs=1e-12)
    assert rep.voigt_eigenvalues.min() == pytest.approx(np.linalg.eigvalsh(iso.voigt)[0])


def test_corrupted_tensor_names_entry(iso, square8):
    full = compute_hom_tensor(square8, iso).full.copy()
    full[0, 0, 0, 1] += 0.1
    with pytest.raises(ValidationError, match="A_1112"):
        validate_hom_tensor(full)


def test_indefinite_tensor_rejected():
    with pytest.raises(ValidationError):
        validate_hom_tensor(np.diag([1.0, -1.0, 1.0]))


def test_c1_decreases_with_inclusion_size(iso):
    c1 = [validate_hom_tensor(compute_hom_tensor(cell("square", a, 16), iso)).C1
          for a in (0.1, 0.2, 0.3, 0.4)]
    assert np.all(np.diff(c1) < 0)


@settings(max_examples=10, deadline=None)
@given(st.lists(st.floats(-0.3, 0.3), min_size=6, max_size=6))
def test_anisotropic_tensor_symmetric_and_elliptic(perturb):
    D = np.diag([3.0, 2.5, 1.0])
    D[np.triu_indices(3)] += perturb
    D = np.triu(D) + np.triu(D, 1).T
    A = HookeTensor(D)
    H = compute_hom_tensor(cell("disk", 0.25, 8), A)
    rep = validate_hom_tensor(H)
    assert rep.major_residual <= 1e-10 and rep.voigt_eigenvalues[0] > 0


def test_matrix_must_exist(iso):
    c = cell("none", 0.0, 4)
    with pytest.raises(GeometryError):
        inclusion_cell_operator(c, iso, 0.0, 1.0, 1.0, 2)


def test_inclusion_operator_zero_rhs(iso, square8):
    op = inclusion_cell_operator(square8, iso, 0.0, 1.0, 1.0, 2)
    assert not np.any(op.solve(np.zeros(len(op.dofs)), 0.0, 1.0, 1.0, 2))
    assert np.allclose(op.matrix(0.0, 1.0, 1.0, 2), op.K)


@pytest.mark.parametrize("size,res", [(0.2, 4), (0.25, 8)])
def test_inclusion_operator_dirichlet_dense(iso, size, res):
    c = cell("square", size, res)
    op = inclusion_cell_operator(c, iso, 0.0, 1.0, 0.0, 2)
    K = assemble(c, iso, "stiffness", tag=INCLUSION, constrained=[]).to_dense()
    M = assemble(c, None, "mass_on_region", tag=INCLUSION, constrained=[]).to_dense()
    b = np.tile([0.3, -0.7], c.n_nodes)
    fixed = np.setdiff1d(np.arange(2 * c.n_nodes), op.dofs)
    ref = oracles.dense_solve(oracles.DenseSystem(K, M @ b, fixed))
    w = op.extend(op.solve((M @ b)[op.dofs], 0.0, 1.0, 0.0, 2))
    assert np.linalg.norm(w - ref) <= 1e-10 * np.linalg.norm(ref)


def test_inclusion_coefficient_scaling(iso, square8):
    op = inclusion_cell_operator(square8, iso, 0.7, 2.0, 1.0, 2)
    assert op.coefficient(0.7, 4.0, 1.0, 2) == op.coefficient(0.7, 2.0, 1.0, 2) / 4
    with pytest.raises(ValidationError):
        op.coefficient(-1.0, 1.0, 1.0, 2)
    with pytest.raises(ValidationError):
        op.coefficient(1.0, np.inf, 1.0, 2)
