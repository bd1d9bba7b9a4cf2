"""Auxiliary spectral spaces and CEM multiscale bases.

Per coarse block a generalized eigenproblem ``A_loc v = lambda S_loc v`` is
solved without boundary conditions on the block.  The retained
eigenvectors define the projection ``pi``; with
``G[:, (i,j)] = S_i phi_j^i`` (scattered to global dofs) one has
``s(pi u, pi v) = (G^T u).(G^T v)``, so the relaxed CEM problem on a patch is

    (A + G G^T) psi = G[:, (i,j)]

and the constrained one is the saddle system ``[[A, G], [G^T, 0]]``.
Both are solved on the interior dofs of the patch (zero trace on its
boundary).  The relaxed system is factorised in the equivalent augmented
form ``[[A, G], [G^T, -I]]`` to keep it sparse.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import _MASS_REF, cell_vector_dofs, strain_matrix
from .grid import CoarseGrid, FineMesh, Patch, PartitionOfUnity, neighborhood_patch, oversample

log = logging.getLogger(__name__)


class BasisError(RuntimeError):
    pass


# ---------------------------------------------------------------- local ops

@dataclass(frozen=True, eq=False)
class ElementMatrices:
    """Per-cell stiffness and weighted-mass matrices for one field."""

    kind: str
    stiff: np.ndarray
    mass: np.ndarray
    dofs: np.ndarray

    def block_operators(self, cells: np.ndarray, block_dofs: np.ndarray):
        """Assemble dense block-local (Neumann) matrices on ``block_dofs``."""
        n = block_dofs.size
        loc = np.searchsorted(block_dofs, self.dofs[cells])
        k = loc.shape[1]
        rows = np.repeat(loc, k, axis=1).ravel()
        cols = np.tile(loc, (1, k)).ravel()
        A = sp.coo_matrix((self.stiff[cells].ravel(), (rows, cols)), shape=(n, n)).toarray()
        S = sp.coo_matrix((self.mass[cells].ravel(), (rows, cols)), shape=(n, n)).toarray()
        return A, S


def element_matrices(mesh: FineMesh, coef, pou: PartitionOfUnity, kind: str) -> ElementMatrices:
    """Element matrices of ``a`` (or ``b``) and of the auxiliary mass.

    The auxiliary weight is ``coef * sum_k |grad chi_k|^2``.
    """
    coef = np.broadcast_to(np.asarray(coef, dtype=float), (mesh.n_cells,))
    area, g = mesh.geometry
    weight = coef * pou.grad_chi_sq_sum
    mass3 = (weight * area)[:, None, None] * _MASS_REF
    if kind == "scalar":
        stiff = np.einsum("c,cad,cbd->cab", coef * area, g, g)
        return ElementMatrices(kind, stiff, mass3, mesh.cells)
    if kind == "vector2":
        B = strain_matrix(mesh)
        stiff = np.einsum("c,cki,ckj->cij", coef * area, B, B)
        mass = np.einsum("cab,ij->caibj", mass3, np.eye(2)).reshape(-1, 6, 6)
        return ElementMatrices(kind, stiff, mass, cell_vector_dofs(mesh))
    raise BasisError(f"unknown kind {kind!r}")


def _dofs(kind: str, nodes: np.ndarray) -> np.ndarray:
    return nodes if kind == "scalar" else FineMesh.vector_dofs(nodes)


# ---------------------------------------------------------------- aux space

@dataclass(frozen=True, eq=False)
class AuxBlock:
    block: int
    dofs: np.ndarray
    eigenvalues: np.ndarray
    vectors: np.ndarray
    next_eigenvalue: float
    S_loc: np.ndarray = field(repr=False)

    @property
    def J(self) -> int:
        return self.vectors.shape[1]


def _fix_signs(V: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    V = V.copy()
    for j in range(V.shape[1]):
        col = V[:, j]
        nz = np.flatnonzero(np.abs(col) > tol * np.abs(col).max())
        if nz.size and col[nz[0]] < 0:
            V[:, j] = -col
    return V


def local_eig(block: int, A_loc, S_loc, J: int, dofs=None) -> AuxBlock:
    """Lowest ``J`` eigenpairs of ``A_loc v = lambda S_loc v``, S-orthonormal.

    ``J`` may equal the block dimension, in which case the first discarded
    eigenvalue is reported as ``inf``.
    """
    A_loc = A_loc.toarray() if sp.issparse(A_loc) else np.asarray(A_loc)
    S_loc = S_loc.toarray() if sp.issparse(S_loc) else np.asarray(S_loc)
    n = A_loc.shape[0]
    if J < 1 or J > n:
        raise BasisError(f"block {block}: requested {J} eigenpairs but block dimension is {n}")
    hi = min(J, n - 1)
    lam, V = sla.eigh(A_loc, S_loc, subset_by_index=[0, hi])
    nxt = float(lam[J]) if J < n else np.inf
    vecs = _fix_signs(V[:, :J])
    dofs = np.arange(n) if dofs is None else dofs
    return AuxBlock(block, dofs, lam[:J].copy(), vecs, nxt, S_loc)


@dataclass(frozen=True, eq=False)
class AuxSpace:
    kind: str
    n_dofs: int
    blocks: list

    @property
    def J(self) -> np.ndarray:
        return np.array([b.J for b in self.blocks])

    @property
    def Lambda(self) -> float:
        return min(b.next_eigenvalue for b in self.blocks)

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.J)])

    def columns(self, blocks) -> np.ndarray:
        off = self.offsets
        return np.concatenate([np.arange(off[b], off[b + 1]) for b in blocks])

    def column(self, i: int, j: int) -> int:
        return int(self.offsets[i] + j)

    @cached_property
    def G(self) -> sp.csc_matrix:
        """Columns ``S_i phi_j^i`` on global dofs (s-projection functionals)."""
        rows, cols, vals = [], [], []
        for b, blk in enumerate(self.blocks):
            W = blk.S_loc @ blk.vectors
            r = np.repeat(blk.dofs, blk.J)
            c = np.tile(np.arange(self.offsets[b], self.offsets[b + 1]), blk.dofs.size)
            rows.append(r)
            cols.append(c)
            vals.append(W.ravel())
        return sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_dofs, int(self.offsets[-1])),
        )

    @cached_property
    def G_rows(self) -> sp.csr_matrix:
        return self.G.tocsr()

    def aux_function(self, i: int, j: int) -> np.ndarray:
        """Auxiliary function on block ``i`` as a block-local vector."""
        return self.blocks[i].vectors[:, j]

    def s_inner(self, i: int, u: np.ndarray, local: np.ndarray) -> float:
        """``s^i(u, v)`` with ``u`` global and ``v`` block-local."""
        blk = self.blocks[i]
        return float(u[blk.dofs] @ (blk.S_loc @ local))

    def project_coefficients(self, u: np.ndarray) -> np.ndarray:
        return self.G.T @ u


def build_aux_space(grid: CoarseGrid, pou: PartitionOfUnity, coef, kind: str, J) -> AuxSpace:
    """Auxiliary space for displacement (``vector2``) or pressure (``scalar``).

    ``coef`` is the per-cell ``kappa`` or ``K`` of the current linearisation.
    """
    mesh = grid.mesh
    em = element_matrices(mesh, coef, pou, kind)
    Js = np.broadcast_to(np.asarray(J, dtype=int), (grid.N,))
    blocks = []
    for b in range(grid.N):
        dofs = _dofs(kind, np.sort(grid.block_nodes(b)))
        A_loc, S_loc = em.block_operators(grid.blocks[b], dofs)
        blocks.append(local_eig(b, A_loc, S_loc, int(Js[b]), dofs))
    n = mesh.n_nodes * (1 if kind == "scalar" else 2)
    return AuxSpace(kind, n, blocks)


# ---------------------------------------------------------------- CEM solves

@dataclass(eq=False)
class PatchSystem:
    """Factorised CEM system on the interior dofs of one patch."""

    patch: Patch
    dofs: np.ndarray
    cols: np.ndarray
    relaxed: bool
    lu: object

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve for right-hand sides given on patch dofs (relaxed) or constraint
        values (constrained).  Returns patch-dof solutions."""
        n = self.dofs.size
        rhs = np.atleast_2d(rhs.T).T
        if self.relaxed:
            full = np.zeros((n + self.cols.size, rhs.shape[1]))
            full[:n] = rhs
        else:
            full = np.zeros((n + self.cols.size, rhs.shape[1]))
            full[n:] = rhs
        try:
            x = self.lu.solve(full)
        except RuntimeError as exc:  # pragma: no cover - superlu internal failure
            raise BasisError(f"patch around block {self.patch.center_block}: {exc}") from exc
        if not np.all(np.isfinite(x)):
            raise BasisError(f"patch around block {self.patch.center_block}: singular CEM system")
        return x[:n]


def patch_system(A: sp.spmatrix, aux: AuxSpace, patch: Patch, relaxed: bool = True) -> PatchSystem:
    dofs = patch.dofs(aux.kind)
    if dofs.size == 0:
        raise BasisError(f"patch around block {patch.center_block} has no interior dofs")
    cols = aux.columns(patch.blocks)
    A_p = A[dofs][:, dofs]
    G_p = aux.G_rows[dofs][:, cols]
    corner = -sp.identity(cols.size) if relaxed else None
    K = sp.bmat([[A_p, G_p], [G_p.T, corner]], format="csc")
    try:
        lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        kind = "relaxed" if relaxed else "constrained (rank-deficient constraints?)"
        raise BasisError(f"patch around block {patch.center_block}: {kind} system is singular") from exc
    return PatchSystem(patch, dofs, cols, relaxed, lu)


def _extend(n: int, dofs: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = np.zeros((n,) + x.shape[1:])
    out[dofs] = x
    return out


def cem_basis_relaxed(patch: Patch, aux: AuxSpace, target, A, system: PatchSystem | None = None):
    """Relaxed CEM basis function for auxiliary target ``(i, j)``, on global dofs."""
    sys_ = system or patch_system(A, aux, patch, relaxed=True)
    i, j = target
    rhs = aux.G_rows[sys_.dofs][:, [aux.column(i, j)]].toarray()
    return _extend(aux.n_dofs, sys_.dofs, sys_.solve(rhs))[:, 0]


def cem_basis_constrained(patch: Patch, aux: AuxSpace, target, A, system: PatchSystem | None = None):
    """Basis minimising ``a(psi, psi)`` under ``s(psi, phi_j'^i') = delta``."""
    sys_ = system or patch_system(A, aux, patch, relaxed=False)
    i, j = target
    e = (sys_.cols == aux.column(i, j)).astype(float)
    if not e.any():
        raise BasisError(f"target block {i} is not inside the patch")
    return _extend(aux.n_dofs, sys_.dofs, sys_.solve(e[:, None]))[:, 0]


# ---------------------------------------------------------------- ms space

@dataclass(frozen=True)
class BasisInfo:
    block: int
    index: int
    layers: int
    kind: str  # "offline" | "online" | "fine"


@dataclass(frozen=True, eq=False)
class MsSpace:
    """Column-stacked basis ``P`` on global fine dofs plus provenance."""

    field_kind: str
    P: sp.csc_matrix
    provenance: tuple

    @property
    def dim(self) -> int:
        return self.P.shape[1]

    @property
    def n_dofs(self) -> int:
        return self.P.shape[0]

    @property
    def n_online(self) -> int:
        return sum(1 for p in self.provenance if p.kind == "online")

    def prolong(self, c: np.ndarray) -> np.ndarray:
        return self.P @ c

    def enrich(self, vectors, provenance) -> "MsSpace":
        vectors = sp.csc_matrix(vectors)
        return replace(self, P=sp.hstack([self.P, vectors], format="csc"),
                       provenance=self.provenance + tuple(provenance))

    @classmethod
    def identity(cls, free_dofs: np.ndarray, n_dofs: int, field_kind: str) -> "MsSpace":
        """The full fine space (one column per free dof)."""
        k = free_dofs.size
        P = sp.csc_matrix((np.ones(k), (free_dofs, np.arange(k))), shape=(n_dofs, k))
        return cls(field_kind, P, tuple(BasisInfo(-1, int(d), 0, "fine") for d in free_dofs))


def _sparsify(cols: np.ndarray, dofs: np.ndarray, n: int) -> sp.csc_matrix:
    k = cols.shape[1]
    r = np.repeat(dofs, k)
    c = np.tile(np.arange(k), dofs.size)
    v = cols.ravel()
    keep = v != 0.0
    return sp.csc_matrix((v[keep], (r[keep], c[keep])), shape=(n, k))


def build_offline_space(grid: CoarseGrid, aux: AuxSpace, A, m: int, relaxed: bool = True) -> MsSpace:
    """One CEM solve per (block, aux index); block-major ordering."""
    pieces, prov = [], []
    for i in range(grid.N):
        patch = oversample(grid, i, m)
        sys_ = patch_system(A, aux, patch, relaxed=relaxed)
        Ji = aux.blocks[i].J
        if relaxed:
            rhs = aux.G_rows[sys_.dofs][:, aux.offsets[i]:aux.offsets[i + 1]].toarray()
        else:
            rhs = np.zeros((sys_.cols.size, Ji))
            first = int(np.searchsorted(sys_.cols, aux.offsets[i]))
            rhs[first:first + Ji] = np.eye(Ji)
        X = sys_.solve(rhs)
        pieces.append(_sparsify(X, sys_.dofs, aux.n_dofs))
        prov.extend(BasisInfo(i, j, m, "offline") for j in range(Ji))
    P = sp.hstack(pieces, format="csc")
    log.debug("offline %s space: dim %d, nnz %d", aux.kind, P.shape[1], P.nnz)
    return MsSpace(aux.kind, P, tuple(prov))


def build_ms_space(grid: CoarseGrid, aux_v: AuxSpace, aux_q: AuxSpace, A, B, m: int, relaxed: bool = True):
    return (build_offline_space(grid, aux_v, A, m, relaxed),
            build_offline_space(grid, aux_q, B, m, relaxed))


# ---------------------------------------------------------------- online

def residual_functional(u_ms: np.ndarray, A, b: np.ndarray, free_dofs=None) -> np.ndarray:
    """Fine dual residual ``b - A u_ms``, zeroed on Dirichlet dofs."""
    r = b - A @ u_ms
    if free_dofs is not None:
        mask = np.zeros(r.size, dtype=bool)
        mask[free_dofs] = True
        r[~mask] = 0.0
    return r


def localize_residual(r: np.ndarray, chi_nodal: np.ndarray, kind: str) -> np.ndarray:
    """``v -> r(chi v)`` with ``chi v`` interpolated nodewise."""
    w = chi_nodal if kind == "scalar" else np.repeat(chi_nodal, 2)
    return r * w


def online_basis(patch: Patch, r_local: np.ndarray, aux: AuxSpace, A,
                 system: PatchSystem | None = None) -> np.ndarray:
    """Solve ``a(beta, v) + s(pi beta, pi v) = r_i(v)`` on the patch."""
    sys_ = system or patch_system(A, aux, patch, relaxed=True)
    rhs = r_local[sys_.dofs]
    if not np.any(rhs):
        return np.zeros(aux.n_dofs)
    return _extend(aux.n_dofs, sys_.dofs, sys_.solve(rhs[:, None]))[:, 0]


def online_sweep(space: MsSpace, grid: CoarseGrid, pou: PartitionOfUnity, aux: AuxSpace, A, b,
                 free_dofs, solve, layers: int = 2, sweep: int = 0):
    """One enrichment step: Galerkin solve, one residual basis per interior vertex.

    ``solve(space) -> fine vector`` supplies the Galerkin solution.
    Returns ``(enriched_space, u_ms, residual)``.
    """
    u_ms = solve(space)
    r = residual_functional(u_ms, A, b, free_dofs)
    cols, prov = [], []
    chi = pou.chi.tocsr()
    for v, k in enumerate(grid.interior_vertices):
        patch = neighborhood_patch(grid, v, layers)
        chi_k = chi[k].toarray().ravel()
        beta = online_basis(patch, localize_residual(r, chi_k, aux.kind), aux, A)
        energy = float(beta @ (A @ beta))
        if not energy > 0.0:
            continue
        # the residual's scale would otherwise make these columns look null
        cols.append(beta / np.sqrt(energy))
        prov.append(BasisInfo(int(k), sweep, layers, "online"))
    if not cols:
        return space, u_ms, r
    return space.enrich(np.column_stack(cols), prov), u_ms, r
