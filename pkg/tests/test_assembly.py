import numpy as np
import pytest
import scipy.sparse as sp

from cemgms.assembly import (
    AssemblyError,
    assemble_a,
    assemble_b,
    assemble_c,
    assemble_d,
    assemble_weighted_mass,
    cell_average,
    divergence,
    elem_strain,
    load_vector,
    mass_form,
    model_source,
    scalar_stiffness_form,
    strain_norm,
    strain_stiffness,
)
from cemgms.constitutive import BetaField
from cemgms.grid import build_fine_mesh


def test_local_stiffness_by_hand():
    mesh = build_fine_mesh(1, 1)
    loc = scalar_stiffness_form(mesh, 1.0).local
    # lower cell (0,0),(1,0),(1,1): right angle at the second node
    assert np.allclose(loc[0], 0.5 * np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1]]))
    # upper cell (0,0),(1,1),(0,1): right angle at the third node
    assert np.allclose(loc[1], 0.5 * np.array([[1, 0, -1], [0, 1, -1], [-1, -1, 2]]))


def test_reference_triangle_stiffness():
    # unit right triangle at the origin, by direct integration of constant gradients
    p = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    g = np.linalg.inv(np.column_stack([np.ones(3), p]))[1:].T
    K = 0.5 * g @ g.T
    assert np.allclose(K, 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]))


def _loop_strain_stiffness(mesh, coef):
    """Independent element loop: gradients from the affine interpolation system."""
    n = 2 * mesh.n_nodes
    A = np.zeros((n, n))
    for c, tri in enumerate(mesh.cells):
        p = mesh.nodes[tri]
        M = np.column_stack([np.ones(3), p])
        area = 0.5 * abs(np.linalg.det(M))
        grads = np.linalg.inv(M)[1:].T  # grads[a] = grad of hat a
        Bs = []
        for a in range(3):
            for comp in range(2):
                G = np.zeros((2, 2))
                G[comp] = grads[a]
                Bs.append(0.5 * (G + G.T))
        dofs = [2 * tri[a] + comp for a in range(3) for comp in range(2)]
        for i, Bi in enumerate(Bs):
            for j, Bj in enumerate(Bs):
                A[dofs[i], dofs[j]] += coef[c] * area * np.sum(Bi * Bj)
    return A


def test_strain_stiffness_matches_loop_assembler(rng):
    mesh = build_fine_mesh(4, 3)
    coef = rng.uniform(1.0, 5.0, mesh.n_cells)
    A = strain_stiffness(mesh, coef).toarray()
    assert np.allclose(A, _loop_strain_stiffness(mesh, coef), atol=1e-13)


def test_rigid_motions_in_kernel(rng):
    mesh = build_fine_mesh(5, 5)
    A = strain_stiffness(mesh, rng.uniform(1, 3, mesh.n_cells))
    x, y = mesh.nodes.T
    for ux, uy in ((np.ones_like(x), 0 * x), (0 * x, np.ones_like(x)), (-y, x)):
        u = np.zeros(2 * mesh.n_nodes)
        u[0::2], u[1::2] = ux, uy
        assert np.abs(A @ u).max() < 1e-12
    assert abs(A - A.T).max() < 1e-14


def test_elem_strain_of_linear_field():
    mesh = build_fine_mesh(3, 3)
    x, y = mesh.nodes.T
    u = np.zeros(2 * mesh.n_nodes)
    u[0::2] = 2 * x + 3 * y
    u[1::2] = -x + 5 * y
    D = elem_strain(u, mesh)
    expect = np.array([[2.0, 1.0], [1.0, 5.0]])
    assert np.allclose(D, expect)
    assert np.allclose(divergence(u, mesh), 7.0)
    assert np.allclose(strain_norm(u, mesh), np.sqrt(4 + 1 + 1 + 25))
    assert np.allclose(elem_strain(u, mesh, cell=4), expect)


def test_mass_and_load_vectors():
    mesh = build_fine_mesh(4, 4)
    M = assemble_weighted_mass(mesh, 1.0, "scalar")
    assert M.sum() == pytest.approx(1.0)
    one = np.ones(mesh.n_nodes)
    assert np.allclose(load_vector(mesh, 1.0), M @ one)
    # edge-midpoint rule is exact for quadratics
    assert load_vector(mesh, lambda x, y: x * x).sum() == pytest.approx(1 / 3, abs=1e-14)
    assert load_vector(mesh, lambda x, y: x * y).sum() == pytest.approx(1 / 4, abs=1e-14)
    Mv = assemble_weighted_mass(mesh, 2.0, "vector2")
    assert Mv.sum() == pytest.approx(4.0)
    bv = load_vector(mesh, np.array([1.0, -2.0]), "vector2")
    assert bv[0::2].sum() == pytest.approx(1.0) and bv[1::2].sum() == pytest.approx(-2.0)
    with pytest.raises(AssemblyError):
        load_vector(mesh, 1.0, "vector2")
    with pytest.raises(AssemblyError):
        mass_form(mesh, 1.0, "tensor")


def test_coupling_matrix_on_linear_field():
    mesh = build_fine_mesh(4, 4)
    x, y = mesh.nodes.T
    u = np.zeros(2 * mesh.n_nodes)
    u[0::2], u[1::2] = 3 * x, -y  # div u = 2
    D = assemble_d(mesh, 0.9)
    assert D.shape == (mesh.n_nodes, 2 * mesh.n_nodes)
    assert np.allclose(D @ u, 0.9 * 2.0 * load_vector(mesh, 1.0))


def test_operator_properties(rng):
    mesh = build_fine_mesh(4, 4)
    K = rng.uniform(0.5, 2.0, mesh.n_cells)
    B = assemble_b(mesh, K)
    assert abs(B - B.T).max() < 1e-14
    assert np.abs(B @ np.ones(mesh.n_nodes)).max() < 1e-13
    C = assemble_c(mesh, 4.0)
    assert C.sum() == pytest.approx(0.25)
    with pytest.raises(AssemblyError):
        assemble_b(mesh, np.zeros(mesh.n_cells))
    with pytest.raises(AssemblyError):
        assemble_c(mesh, 0.0)
    with pytest.raises(AssemblyError):
        strain_stiffness(mesh, np.ones(3))


def test_linearised_stiffness_uses_kappa():
    mesh = build_fine_mesh(3, 3)
    x, y = mesh.nodes.T
    u = np.zeros(2 * mesh.n_nodes)
    u[0::2] = 0.1 * x
    beta = BetaField.constant(mesh.n_cells, 5.0)
    k = 1 / (1 - 5.0 * 0.1)
    assert np.allclose(assemble_a(mesh, beta, u).toarray(), k * strain_stiffness(mesh, 1.0).toarray())


def test_misc():
    mesh = build_fine_mesh(2, 2)
    assert np.allclose(cell_average(mesh, np.arange(mesh.n_nodes)), mesh.nodes[mesh.cells].mean(1) @ [2, 6])
    assert model_source(0.0, 0.0) == pytest.approx(1e-4)
    assert sp.issparse(assemble_b(mesh, 1.0))
