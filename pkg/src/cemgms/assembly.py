"""P1 assembly of the bilinear forms on the fine triangulation.

All operators are returned on the full dof set (no boundary elimination);
use :meth:`cemgms.grid.DofMap.restrict` to drop the Dirichlet dofs.
Coefficients are per-cell constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .constitutive import BetaField, DEFAULT_CLAMP_EPS, frobenius, kappa
from .grid import FineMesh

SQRT2 = np.sqrt(2.0)


class AssemblyError(ValueError):
    pass


def _coeff(mesh: FineMesh, c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.ndim == 0:
        return np.full(mesh.n_cells, float(c))
    if c.shape != (mesh.n_cells,):
        raise AssemblyError(f"per-cell coefficient has shape {c.shape}, expected ({mesh.n_cells},)")
    return c


def _scatter(local, dofs, n_rows, n_cols=None, row_dofs=None):
    n_cols = n_rows if n_cols is None else n_cols
    row_dofs = dofs if row_dofs is None else row_dofs
    k_r, k_c = local.shape[1], local.shape[2]
    rows = np.repeat(row_dofs, k_c, axis=1).ravel()
    cols = np.tile(dofs, (1, k_r)).ravel()
    A = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n_rows, n_cols)).tocsr()
    A.sum_duplicates()
    return A


def cell_vector_dofs(mesh: FineMesh) -> np.ndarray:
    c = mesh.cells
    return np.stack([2 * c, 2 * c + 1], axis=2).reshape(-1, 6)


def strain_matrix(mesh: FineMesh) -> np.ndarray:
    """Per-cell ``B`` with ``B @ u_loc = (e_xx, e_yy, sqrt2 e_xy)``.

    The sqrt(2) makes the Euclidean product of rows equal to the Frobenius
    product of the symmetric tensors.
    """
    _, g = mesh.geometry
    B = np.zeros((mesh.n_cells, 3, 6))
    B[:, 0, 0::2] = g[:, :, 0]
    B[:, 1, 1::2] = g[:, :, 1]
    B[:, 2, 0::2] = g[:, :, 1] / SQRT2
    B[:, 2, 1::2] = g[:, :, 0] / SQRT2
    return B


def elem_strain(u, mesh: FineMesh, cell=None) -> np.ndarray:
    """Symmetric gradient ``(grad u + grad u^T)/2`` per cell, shape ``(n, 2, 2)``."""
    u = np.asarray(u, dtype=float)
    _, g = mesh.geometry
    cells = mesh.cells if cell is None else mesh.cells[np.atleast_1d(cell)]
    g = g if cell is None else g[np.atleast_1d(cell)]
    ux = u[0::2][cells]
    uy = u[1::2][cells]
    grad = np.empty((cells.shape[0], 2, 2))
    grad[:, 0, :] = np.einsum("ca,cad->cd", ux, g)
    grad[:, 1, :] = np.einsum("ca,cad->cd", uy, g)
    D = 0.5 * (grad + grad.transpose(0, 2, 1))
    return D[0] if cell is not None and np.ndim(cell) == 0 else D


def strain_norm(u, mesh: FineMesh) -> np.ndarray:
    return frobenius(elem_strain(u, mesh))


def divergence(u, mesh: FineMesh) -> np.ndarray:
    D = elem_strain(u, mesh)
    return D[:, 0, 0] + D[:, 1, 1]


def kappa_field(mesh: FineMesh, beta: BetaField, u, eps=DEFAULT_CLAMP_EPS) -> np.ndarray:
    return kappa(beta.values, strain_norm(u, mesh), eps)


@dataclass(frozen=True, eq=False)
class ElementForm:
    """Unassembled per-cell matrices ``local[c]`` acting from ``col_dofs[c]``
    to ``row_dofs[c]``."""

    local: np.ndarray
    row_dofs: np.ndarray
    col_dofs: np.ndarray
    shape: tuple

    def assemble(self) -> sp.csr_matrix:
        return _scatter(self.local, self.col_dofs, self.shape[0], self.shape[1], row_dofs=self.row_dofs)


def strain_stiffness_form(mesh: FineMesh, coef) -> ElementForm:
    coef = _coeff(mesh, coef)
    area, _ = mesh.geometry
    B = strain_matrix(mesh)
    local = np.einsum("c,cki,ckj->cij", coef * area, B, B)
    dofs = cell_vector_dofs(mesh)
    n = 2 * mesh.n_nodes
    return ElementForm(local, dofs, dofs, (n, n))


def scalar_stiffness_form(mesh: FineMesh, coef) -> ElementForm:
    coef = _coeff(mesh, coef)
    area, g = mesh.geometry
    local = np.einsum("c,cad,cbd->cab", coef * area, g, g)
    return ElementForm(local, mesh.cells, mesh.cells, (mesh.n_nodes, mesh.n_nodes))


def mass_form(mesh: FineMesh, weight, kind: str = "scalar") -> ElementForm:
    weight = _coeff(mesh, weight)
    area, _ = mesh.geometry
    local = (weight * area)[:, None, None] * _MASS_REF
    if kind == "scalar":
        return ElementForm(local, mesh.cells, mesh.cells, (mesh.n_nodes, mesh.n_nodes))
    if kind == "vector2":
        local = np.einsum("cab,ij->caibj", local, np.eye(2)).reshape(-1, 6, 6)
        dofs = cell_vector_dofs(mesh)
        n = 2 * mesh.n_nodes
        return ElementForm(local, dofs, dofs, (n, n))
    raise AssemblyError(f"unknown kind {kind!r}")


def coupling_form(mesh: FineMesh, alpha: float) -> ElementForm:
    area, g = mesh.geometry
    # div of vector hat (a, comp) is g[a, comp]; a scalar hat integrates to |T|/3
    div_loc = g.reshape(-1, 6)
    local = np.repeat((alpha * area / 3.0)[:, None, None] * div_loc[:, None, :], 3, axis=1)
    return ElementForm(local, mesh.cells, cell_vector_dofs(mesh), (mesh.n_nodes, 2 * mesh.n_nodes))


def strain_stiffness(mesh: FineMesh, coef) -> sp.csr_matrix:
    """``(A v).w = sum_T coef_T |T| Dv:Dw`` on interleaved vector dofs."""
    return strain_stiffness_form(mesh, coef).assemble()


def assemble_a(mesh: FineMesh, beta: BetaField, u_prev, eps=DEFAULT_CLAMP_EPS) -> sp.csr_matrix:
    """Linearised strain-limiting stiffness with ``kappa`` frozen at ``u_prev``."""
    return strain_stiffness(mesh, kappa_field(mesh, beta, u_prev, eps))


def assemble_b(mesh: FineMesh, K_field) -> sp.csr_matrix:
    K_field = _coeff(mesh, K_field)
    if np.any(~(K_field > 0)):
        raise AssemblyError("permeability must be strictly positive on every cell")
    return scalar_stiffness_form(mesh, K_field).assemble()


_MASS_REF = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def assemble_weighted_mass(mesh: FineMesh, weight, kind: str = "scalar") -> sp.csr_matrix:
    return mass_form(mesh, weight, kind).assemble()


def assemble_c(mesh: FineMesh, M: float) -> sp.csr_matrix:
    if not M > 0:
        raise AssemblyError(f"Biot modulus must be positive (got {M})")
    return assemble_weighted_mass(mesh, 1.0 / M, "scalar")


def assemble_d(mesh: FineMesh, alpha: float) -> sp.csr_matrix:
    """Coupling ``D[q, u] = int alpha div(u) q``; shape ``(n_nodes, 2 n_nodes)``."""
    return coupling_form(mesh, alpha).assemble()


def _eval_source(f, x, y):
    if callable(f):
        val = f(x, y)
    else:
        val = f
    val = np.asarray(val, dtype=float)
    if val.ndim == 0:
        return np.full_like(x, float(val))
    if val.shape == (2,):
        return np.broadcast_to(val[:, None], (2, x.shape[0]))
    return val


def load_vector(mesh: FineMesh, f, kind: str = "scalar") -> np.ndarray:
    """Nodal loads by the edge-midpoint rule (exact for quadratic integrands).

    ``f(x, y)`` returns an array of values (scalar kind) or a pair of arrays
    (vector kind).  Constants are accepted in place of callables.
    """
    area, _ = mesh.geometry
    p = mesh.nodes[mesh.cells]
    mids = np.stack([(p[:, 0] + p[:, 1]) / 2, (p[:, 1] + p[:, 2]) / 2, (p[:, 2] + p[:, 0]) / 2], axis=1)
    xm, ym = mids[..., 0].ravel(), mids[..., 1].ravel()
    fv = _eval_source(f, xm, ym)
    # midpoint e lies on the edge (e, e+1): each of those two hats is 1/2 there
    share = np.array([[0.5, 0.0, 0.5], [0.5, 0.5, 0.0], [0.0, 0.5, 0.5]])  # [node a, midpoint e]
    w = (area / 3.0)[:, None]
    if kind == "scalar":
        fm = np.asarray(fv).reshape(mesh.n_cells, 3)
        loc = w * (fm @ share.T)
        return np.bincount(mesh.cells.ravel(), loc.ravel(), minlength=mesh.n_nodes)
    if kind == "vector2":
        fv = np.asarray(fv)
        if fv.ndim == 1:
            raise AssemblyError("vector load needs a two-component source")
        out = np.zeros(2 * mesh.n_nodes)
        for comp in range(2):
            fm = fv[comp].reshape(mesh.n_cells, 3)
            loc = w * (fm @ share.T)
            out[comp::2] = np.bincount(mesh.cells.ravel(), loc.ravel(), minlength=mesh.n_nodes)
        return out
    raise AssemblyError(f"unknown kind {kind!r}")


def model_source(x, y):
    """Model source ``1e-4 sqrt(x^2 + y^2 + 1)``."""
    return 1.0e-4 * np.sqrt(x * x + y * y + 1.0)


def model_source_vector(x, y):
    v = model_source(x, y)
    return np.stack([v, v])


def cell_average(mesh: FineMesh, nodal) -> np.ndarray:
    return np.asarray(nodal, dtype=float)[mesh.cells].mean(axis=1)
