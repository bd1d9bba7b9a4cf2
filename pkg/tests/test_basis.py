import numpy as np
import pytest
import scipy.linalg as sla

from cemgms.assembly import load_vector, model_source_vector, strain_stiffness, strain_stiffness_form
from cemgms.basis import (
    BasisError,
    build_aux_space,
    build_offline_space,
    cem_basis_constrained,
    cem_basis_relaxed,
    element_matrices,
    local_eig,
    online_sweep,
    patch_system,
    residual_functional,
)
from cemgms.grid import oversample
from cemgms.solvers import adaptive_enrich, fine_space, galerkin_solve


def _energy_error(u, ref, A):
    e = u - ref
    return np.sqrt(e @ (A @ e) / (ref @ (A @ ref)))


def test_local_eig_matches_dense_oracle(rng):
    n = 7
    X = rng.standard_normal((n, n))
    A = X @ X.T
    Y = rng.standard_normal((n, n))
    S = Y @ Y.T + n * np.eye(n)
    blk = local_eig(0, A, S, 3)
    lam = sla.eigh(A, S, eigvals_only=True)
    assert np.allclose(blk.eigenvalues, lam[:3])
    assert blk.next_eigenvalue == pytest.approx(lam[3])
    assert np.allclose(blk.vectors.T @ S @ blk.vectors, np.eye(3), atol=1e-12)
    full = local_eig(0, A, S, n)
    assert full.next_eigenvalue == np.inf
    with pytest.raises(BasisError):
        local_eig(0, A, S, n + 1)


def test_aux_space_properties(setup16):
    mesh, grid, pou = setup16
    aux = build_aux_space(grid, pou, 1.0, "vector2", 4)
    assert aux.J.tolist() == [4] * grid.N
    # three rigid motions per block have zero strain energy
    for blk in aux.blocks:
        assert np.all(np.abs(blk.eigenvalues[:3]) < 1e-10)
        assert blk.eigenvalues[3] > 1e-6
    assert aux.Lambda > 0
    assert aux.G.shape == (2 * mesh.n_nodes, 4 * grid.N)
    em = element_matrices(mesh, 1.0, pou, "scalar")
    assert em.stiff.shape == (mesh.n_cells, 3, 3)
    with pytest.raises(BasisError):
        element_matrices(mesh, 1.0, pou, "tensor")


def test_relaxed_basis_solves_cem_system(setup16):
    mesh, grid, pou = setup16
    A = strain_stiffness(mesh, 1.0)
    aux = build_aux_space(grid, pou, 1.0, "vector2", 3)
    patch = oversample(grid, 5, 1)
    psi = cem_basis_relaxed(patch, aux, (5, 1), A)
    dofs = patch.dofs("vector2")
    cols = aux.columns(patch.blocks)
    G = aux.G.toarray()[np.ix_(dofs, cols)]
    lhs = A.toarray()[np.ix_(dofs, dofs)] + G @ G.T
    rhs = aux.G.toarray()[dofs, aux.column(5, 1)]
    assert np.allclose(lhs @ psi[dofs], rhs, atol=1e-12)
    outside = np.setdiff1d(np.arange(aux.n_dofs), dofs)
    assert np.all(psi[outside] == 0)


def test_constrained_basis_kkt(setup16):
    mesh, grid, pou = setup16
    A = strain_stiffness(mesh, 1.0)
    aux = build_aux_space(grid, pou, 1.0, "vector2", 3)
    patch = oversample(grid, 6, 1)
    psi = cem_basis_constrained(patch, aux, (6, 2), A)
    dofs = patch.dofs("vector2")
    cols = aux.columns(patch.blocks)
    G = aux.G.toarray()[np.ix_(dofs, cols)]
    e = (cols == aux.column(6, 2)).astype(float)
    assert np.allclose(G.T @ psi[dofs], e, atol=1e-10)
    # dense KKT oracle
    Ap = A.toarray()[np.ix_(dofs, dofs)]
    K = np.block([[Ap, G], [G.T, np.zeros((cols.size, cols.size))]])
    x = np.linalg.solve(K, np.concatenate([np.zeros(dofs.size), e]))
    assert np.allclose(psi[dofs], x[:dofs.size], atol=1e-10)
    with pytest.raises(BasisError):
        cem_basis_constrained(oversample(grid, 0, 0), aux, (15, 0), A)


def test_offline_space_layout(setup16):
    mesh, grid, pou = setup16
    A = strain_stiffness(mesh, 1.0)
    aux = build_aux_space(grid, pou, 1.0, "vector2", 2)
    V = build_offline_space(grid, aux, A, 1)
    assert V.dim == 2 * grid.N
    assert V.provenance[3].block == 1 and V.provenance[3].index == 1
    assert all(p.kind == "offline" and p.layers == 1 for p in V.provenance)
    # column support stays inside its oversampled patch
    support = oversample(grid, 7, 1).dofs("vector2")
    col = V.P[:, aux.column(7, 0)].toarray().ravel()
    assert set(np.flatnonzero(col)) <= set(support)
    Vc = build_offline_space(grid, aux, A, 1, relaxed=False)
    assert Vc.dim == V.dim


def test_more_layers_reduce_error(setup16):
    mesh, grid, pou = setup16
    form = strain_stiffness_form(mesh, 1.0)
    A = form.assemble()
    b = load_vector(mesh, model_source_vector, "vector2")
    ref = galerkin_solve(A, b, fine_space(mesh, "vector2"))
    aux = build_aux_space(grid, pou, 1.0, "vector2", 3)
    errs = [_energy_error(galerkin_solve(A, b, build_offline_space(grid, aux, A, m), grid, form), ref, A)
            for m in (1, 2)]
    assert errs[1] < errs[0] < 0.5


def test_online_enrichment_reduces_error(setup16):
    mesh, grid, pou = setup16
    form = strain_stiffness_form(mesh, 1.0)
    A = form.assemble()
    b = load_vector(mesh, model_source_vector, "vector2")
    free = mesh.dof_map("vector2").free_dofs
    ref = galerkin_solve(A, b, fine_space(mesh, "vector2"))
    aux = build_aux_space(grid, pou, 1.0, "vector2", 2)
    V = build_offline_space(grid, aux, A, 1)
    V1, res = adaptive_enrich(V, grid, pou, aux, form, b, free, 2)
    assert V1.dim == V.dim + 2 * grid.N_v
    assert V1.n_online == 2 * grid.N_v
    assert res[1] < res[0]
    online = V1.P[:, V.dim:].toarray()
    energies = np.einsum("ij,ij->j", online, A @ online)
    assert np.allclose(energies, 1.0)
    e0 = _energy_error(galerkin_solve(A, b, V, grid, form), ref, A)
    e1 = _energy_error(galerkin_solve(A, b, V1, grid, form), ref, A)
    assert e1 < 0.5 * e0


def test_online_sweep_without_residual(setup16):
    mesh, grid, pou = setup16
    A = strain_stiffness(mesh, 1.0)
    aux = build_aux_space(grid, pou, 1.0, "vector2", 2)
    V = build_offline_space(grid, aux, A, 1)
    b = np.zeros(2 * mesh.n_nodes)
    V1, u, r = online_sweep(V, grid, pou, aux, A, b, None, lambda s: np.zeros(s.n_dofs))
    assert V1.dim == V.dim and not r.any()


def test_residual_zero_on_dirichlet(setup16):
    mesh, _, _ = setup16
    A = strain_stiffness(mesh, 1.0)
    b = np.ones(2 * mesh.n_nodes)
    free = mesh.dof_map("vector2").free_dofs
    r = residual_functional(np.zeros_like(b), A, b, free)
    bnd = mesh.vector_dofs(mesh.boundary_nodes)
    assert np.all(r[bnd] == 0) and np.all(r[free] == 1)


def test_patch_system_rejects_empty_patch():
    from cemgms.grid import build_coarse_grid, build_fine_mesh, partition_of_unity
    mesh = build_fine_mesh(4, 4)
    grid = build_coarse_grid(mesh, 4)  # one fine square per block: no interior nodes
    aux = build_aux_space(grid, partition_of_unity(grid), 1.0, "scalar", 1)
    with pytest.raises(BasisError):
        patch_system(strain_stiffness(mesh, 1.0), aux, oversample(grid, 0, 0))
