"""Reduced (Galerkin) operators ``P_r^T K P_c`` for multiscale spaces.

Forming ``P^T K P`` with sparse-sparse products is dominated by the fill of
``K P``.  Since every fine form is a sum of coarse-block contributions,
``P_r^T K P_c = sum_b (R_b P_r)^T K_b (R_b P_c)`` where ``K_b`` is the dense
block-local matrix; each term is a small dense product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .assembly import ElementForm
from .basis import MsSpace
from .grid import CoarseGrid


@dataclass(frozen=True, eq=False)
class _BlockRestriction:
    dofs: np.ndarray      # block dofs (sorted)
    local: np.ndarray     # cell dof -> position in ``dofs``
    cols: np.ndarray      # basis columns touching the block
    P: np.ndarray         # dense R_b P[:, cols]
    runs: list            # (lo, hi, col0): cols[lo:hi] == col0 + arange(hi - lo)


def _runs(cols: np.ndarray) -> list:
    if cols.size == 0:
        return []
    cut = np.flatnonzero(np.diff(cols) != 1) + 1
    lo = np.concatenate([[0], cut])
    hi = np.concatenate([cut, [cols.size]])
    return [(int(a), int(b), int(cols[a])) for a, b in zip(lo, hi)]


def _restrictions(grid: CoarseGrid, P: sp.spmatrix, cell_dofs: np.ndarray):
    # Entries are looked up in the sorted (column, row) keys of a CSC copy;
    # converting a large basis matrix to CSR is much slower.
    P = sp.csc_matrix(P)
    P.sort_indices()
    n_rows, n_cols = P.shape
    keys = np.repeat(np.arange(n_cols, dtype=np.int64), np.diff(P.indptr)) * n_rows + P.indices
    block_dofs = [np.unique(cell_dofs[cells]) for cells in grid.blocks]
    lens = [d.size for d in block_dofs]
    incidence = sp.csc_matrix(
        (np.ones(sum(lens)), (np.concatenate(block_dofs), np.repeat(np.arange(grid.N), lens))),
        shape=(n_rows, grid.N),
    )
    touch = sp.csc_matrix(P.T.tocsr() @ incidence)
    out = []
    for b, cells in enumerate(grid.blocks):
        dofs = block_dofs[b]
        cols = touch.indices[touch.indptr[b]:touch.indptr[b + 1]]
        cols = np.sort(cols)
        query = (cols[None, :].astype(np.int64) * n_rows + dofs[:, None]).ravel()
        pos = np.minimum(np.searchsorted(keys, query), keys.size - 1)
        hit = keys[pos] == query
        dense = np.where(hit, P.data[pos], 0.0).reshape(dofs.size, cols.size)
        local = np.searchsorted(dofs, cell_dofs[cells])
        out.append(_BlockRestriction(dofs, local, cols, dense, _runs(cols)))
    return out


class BlockProjector:
    """Exact Galerkin matrices of element forms onto a pair of spaces.

    Restrictions of the basis to each block are computed once per space and
    field kind; projecting a new form only costs the dense block products.
    """

    def __init__(self, grid: CoarseGrid):
        self.grid = grid
        self._cache = {}

    def _get(self, space: MsSpace, cell_dofs: np.ndarray):
        key = (id(space), cell_dofs.shape[1])
        if key not in self._cache:
            self._cache[key] = (space, _restrictions(self.grid, space.P, cell_dofs))
        return self._cache[key][1]

    def project(self, form: ElementForm, row_space: MsSpace, col_space: MsSpace | None = None,
                out: np.ndarray | None = None) -> np.ndarray:
        """``P_r^T K P_c`` as a dense array (written into ``out`` if given)."""
        col_space = row_space if col_space is None else col_space
        rows = self._get(row_space, form.row_dofs)
        cols = self._get(col_space, form.col_dofs)
        shape = (row_space.dim, col_space.dim)
        if out is None or out.shape != shape:
            out = np.zeros(shape)
        else:
            out.fill(0.0)
        kr, kc = form.local.shape[1:]
        for cells, r, c in zip(self.grid.blocks, rows, cols):
            ri = np.repeat(r.local, kc, axis=1).ravel()
            ci = np.tile(c.local, (1, kr)).ravel()
            Kb = sp.coo_matrix((form.local[cells].ravel(), (ri, ci)),
                               shape=(r.dofs.size, c.dofs.size)).toarray()
            prod = r.P.T @ (Kb @ c.P)
            # slice updates per pair of contiguous column runs; fancy-index
            # scatter of the full product is far slower
            for a0, a1, ga in r.runs:
                for b0, b1, gb in c.runs:
                    out[ga:ga + a1 - a0, gb:gb + b1 - b0] += prod[a0:a1, b0:b1]
        return out


def sparse_galerkin(K: sp.spmatrix, row_space: MsSpace, col_space: MsSpace | None = None) -> sp.csr_matrix:
    """``P_r^T K P_c`` by sparse products (cheap when ``P`` is a selection)."""
    col_space = row_space if col_space is None else col_space
    return sp.csr_matrix(row_space.P.T @ (sp.csr_matrix(K) @ col_space.P))
