"""Structured fine mesh, coarse partition, oversampled patches and the
coarse partition of unity.

Node numbering is row-major: node ``(i, j)`` (``i`` along x, ``j`` along y)
has index ``j*(nx+1) + i``.  Every grid square is split along its main
diagonal into two counter-clockwise triangles, so square ``(i, j)`` owns
cells ``2*(j*nx + i)`` and ``2*(j*nx + i) + 1``.  Vector fields are stored
interleaved: node ``a`` carries dofs ``2a`` (x) and ``2a+1`` (y).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FineMesh:
    nx: int
    ny: int
    nodes: np.ndarray
    cells: np.ndarray
    boundary_nodes: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    @property
    def h(self) -> float:
        return math.hypot(1.0 / self.nx, 1.0 / self.ny)

    def node_index(self, i, j):
        return np.asarray(j) * (self.nx + 1) + np.asarray(i)

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def cell_square(self) -> np.ndarray:
        """(i, j) index of the grid square containing each cell."""
        sq = np.arange(self.n_cells) // 2
        return np.column_stack([sq % self.nx, sq // self.nx])

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.cells].mean(axis=1)

    @cached_property
    def geometry(self):
        """Cell areas and gradients of the three P1 shape functions.

        Returns ``(area, grads)`` with ``grads[c, a]`` the constant gradient
        of the hat function of local node ``a`` on cell ``c``.
        """
        p = self.nodes[self.cells]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(det <= 0.0):
            raise ConfigurationError("degenerate or inverted triangle in fine mesh")
        # rows of inv(J)^T give grad(lambda_1), grad(lambda_2)
        g1 = np.column_stack([e2[:, 1], -e2[:, 0]]) / det[:, None]
        g2 = np.column_stack([-e1[:, 1], e1[:, 0]]) / det[:, None]
        grads = np.stack([-g1 - g2, g1, g2], axis=1)
        return 0.5 * det, grads

    @cached_property
    def gradient_operators(self):
        """Sparse maps nodal scalar -> per-cell d/dx, d/dy."""
        _, grads = self.geometry
        rows = np.repeat(np.arange(self.n_cells), 3)
        cols = self.cells.ravel()
        shape = (self.n_cells, self.n_nodes)
        gx = sp.csr_matrix((grads[:, :, 0].ravel(), (rows, cols)), shape=shape)
        gy = sp.csr_matrix((grads[:, :, 1].ravel(), (rows, cols)), shape=shape)
        return gx, gy

    @staticmethod
    def vector_dofs(node_ids) -> np.ndarray:
        node_ids = np.asarray(node_ids)
        return np.column_stack([2 * node_ids, 2 * node_ids + 1]).ravel()

    def dof_map(self, kind: str) -> "DofMap":
        return DofMap(self, kind)


@dataclass(frozen=True, eq=False)
class DofMap:
    """Node/dof correspondence and the free (non-Dirichlet) dofs."""

    mesh: FineMesh
    kind: str

    def __post_init__(self):
        if self.kind not in ("scalar", "vector2"):
            raise ConfigurationError(f"unknown dof kind {self.kind!r}")

    @property
    def multiplicity(self) -> int:
        return 1 if self.kind == "scalar" else 2

    @property
    def n_dofs(self) -> int:
        return self.multiplicity * self.mesh.n_nodes

    def dofs_of(self, node_ids) -> np.ndarray:
        if self.kind == "scalar":
            return np.asarray(node_ids)
        return FineMesh.vector_dofs(node_ids)

    @cached_property
    def free_dofs(self) -> np.ndarray:
        return self.dofs_of(self.mesh.interior_nodes)

    def restrict(self, A):
        idx = self.free_dofs
        return A[idx][:, idx]

    def extend(self, x_free) -> np.ndarray:
        x = np.zeros(self.n_dofs)
        x[self.free_dofs] = x_free
        return x


def build_fine_mesh(nx: int, ny: int) -> FineMesh:
    nx, ny = int(nx), int(ny)
    if nx < 1 or ny < 1:
        raise ConfigurationError(f"mesh needs nx, ny >= 1 (got {nx}, {ny})")
    xs = np.linspace(0.0, 1.0, nx + 1)
    ys = np.linspace(0.0, 1.0, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    n00 = j * (nx + 1) + i
    n10 = n00 + 1
    n01 = n00 + nx + 1
    n11 = n01 + 1
    lower = np.column_stack([n00, n10, n11])
    upper = np.column_stack([n00, n11, n01])
    cells = np.stack([lower, upper], axis=1).reshape(-1, 3)

    I, Jn = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1))
    on_bnd = (I == 0) | (I == nx) | (Jn == 0) | (Jn == ny)
    boundary = np.flatnonzero(on_bnd.ravel())
    return FineMesh(nx, ny, nodes, cells.astype(np.int64), boundary)


@dataclass(frozen=True, eq=False)
class CoarseGrid:
    mesh: FineMesh
    nc: int
    cells_per_block: tuple
    blocks: list
    vertices: np.ndarray
    interior_vertices: np.ndarray
    neighborhoods: list
    cell_block: np.ndarray = field(repr=False)

    @property
    def N(self) -> int:
        return self.nc * self.nc

    @property
    def N_v(self) -> int:
        return len(self.interior_vertices)

    @property
    def H(self) -> float:
        return math.hypot(1.0 / self.nc, 1.0 / self.nc)

    def block_ij(self, b: int):
        return b % self.nc, b // self.nc

    def block_index(self, I: int, J: int) -> int:
        return J * self.nc + I

    def block_nodes(self, b: int) -> np.ndarray:
        """All fine nodes of block ``b`` (closure, so shared interfaces included)."""
        I, J = self.block_ij(b)
        return _box_nodes(self, I, I, J, J)

    def vertex_ij(self, k: int):
        return k % (self.nc + 1), k // (self.nc + 1)


def build_coarse_grid(mesh: FineMesh, nc: int) -> CoarseGrid:
    nc = int(nc)
    if nc < 1 or mesh.nx % nc or mesh.ny % nc:
        raise ConfigurationError(
            f"coarse count Nc={nc} must divide the fine counts nx={mesh.nx}, ny={mesh.ny}"
        )
    bx, by = mesh.nx // nc, mesh.ny // nc
    sq = mesh.cell_square
    cell_block = (sq[:, 1] // by) * nc + sq[:, 0] // bx
    order = np.argsort(cell_block, kind="stable")
    counts = np.bincount(cell_block, minlength=nc * nc)
    blocks = np.split(order, np.cumsum(counts)[:-1])

    vs = np.linspace(0.0, 1.0, nc + 1)
    VX, VY = np.meshgrid(vs, vs)
    vertices = np.column_stack([VX.ravel(), VY.ravel()])
    interior, neigh = [], []
    for vj in range(1, nc):
        for vi in range(1, nc):
            interior.append(vj * (nc + 1) + vi)
            neigh.append(np.array([J * nc + I for J in (vj - 1, vj) for I in (vi - 1, vi)]))
    return CoarseGrid(
        mesh, nc, (bx, by), blocks, vertices,
        np.array(interior, dtype=np.int64), neigh, cell_block,
    )


@dataclass(frozen=True, eq=False)
class Patch:
    """A rectangle of coarse blocks ``[I0, I1] x [J0, J1]`` (inclusive)."""

    center_block: int
    layers: int
    box: tuple
    blocks: np.ndarray
    fine_nodes: np.ndarray
    interior_nodes: np.ndarray

    def dofs(self, kind: str) -> np.ndarray:
        return self.interior_nodes if kind == "scalar" else FineMesh.vector_dofs(self.interior_nodes)


def _box_nodes(grid: CoarseGrid, I0, I1, J0, J1, interior=False) -> np.ndarray:
    bx, by = grid.cells_per_block
    nx = grid.mesh.nx
    i0, i1 = I0 * bx, (I1 + 1) * bx
    j0, j1 = J0 * by, (J1 + 1) * by
    if interior:
        i0, i1, j0, j1 = i0 + 1, i1 - 1, j0 + 1, j1 - 1
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1))
    return (jj * (nx + 1) + ii).ravel()


def box_patch(grid: CoarseGrid, I0, I1, J0, J1, center=-1, layers=0) -> Patch:
    nc = grid.nc
    I0, J0 = max(I0, 0), max(J0, 0)
    I1, J1 = min(I1, nc - 1), min(J1, nc - 1)
    blocks = np.array([J * nc + I for J in range(J0, J1 + 1) for I in range(I0, I1 + 1)])
    return Patch(
        center, layers, (I0, I1, J0, J1), blocks,
        _box_nodes(grid, I0, I1, J0, J1),
        _box_nodes(grid, I0, I1, J0, J1, interior=True),
    )


def oversample(grid: CoarseGrid, i: int, m: int) -> Patch:
    """Block ``i`` grown by ``m`` layers of touching blocks, clipped at the boundary."""
    if not 0 <= i < grid.N:
        raise ConfigurationError(f"block index {i} outside [0, {grid.N})")
    if m < 0:
        raise ConfigurationError(f"layer count must be >= 0 (got {m})")
    I, J = grid.block_ij(i)
    return box_patch(grid, I - m, I + m, J - m, J + m, center=i, layers=m)


def neighborhood_patch(grid: CoarseGrid, v: int, layers: int = 2) -> Patch:
    """Coarse neighborhood of interior-vertex number ``v`` grown by ``layers`` blocks."""
    k = grid.interior_vertices[v]
    vi, vj = grid.vertex_ij(k)
    return box_patch(grid, vi - 1 - layers, vi + layers, vj - 1 - layers, vj + layers,
                     center=-1, layers=layers)


@dataclass(frozen=True, eq=False)
class PartitionOfUnity:
    chi: sp.csr_matrix  # (n_vertices, n_nodes)
    grad_chi_sq_sum: np.ndarray  # per fine cell


def hat_values(grid: CoarseGrid, k: int, xy: np.ndarray) -> np.ndarray:
    """Bilinear coarse hat of vertex ``k`` evaluated at arbitrary points."""
    vx, vy = grid.vertices[k]
    n = grid.nc
    return (np.clip(1 - np.abs(xy[:, 0] - vx) * n, 0, None)
            * np.clip(1 - np.abs(xy[:, 1] - vy) * n, 0, None))


def partition_of_unity(grid: CoarseGrid, mesh: FineMesh | None = None) -> PartitionOfUnity:
    mesh = grid.mesh if mesh is None else mesh
    bx, by = grid.cells_per_block
    nc = grid.nc
    I, Jn = np.meshgrid(np.arange(mesh.nx + 1), np.arange(mesh.ny + 1))
    I, Jn = I.ravel(), Jn.ravel()
    node = np.arange(mesh.n_nodes)
    # each fine node sees the 4 corner vertices of the block it lies in
    vi0 = np.minimum(I // bx, nc - 1)
    vj0 = np.minimum(Jn // by, nc - 1)
    tx = I / bx - vi0
    ty = Jn / by - vj0
    rows, cols, vals = [], [], []
    for di, wx in ((0, 1 - tx), (1, tx)):
        for dj, wy in ((0, 1 - ty), (1, ty)):
            w = wx * wy
            keep = w > 0
            rows.append((vj0 + dj)[keep] * (nc + 1) + (vi0 + di)[keep])
            cols.append(node[keep])
            vals.append(w[keep])
    chi = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=((nc + 1) ** 2, mesh.n_nodes),
    )
    gx, gy = mesh.gradient_operators
    dx = (chi @ gx.T).tocsr()
    dy = (chi @ gy.T).tocsr()
    gsq = np.asarray(dx.multiply(dx).sum(axis=0)).ravel() + np.asarray(dy.multiply(dy).sum(axis=0)).ravel()
    return PartitionOfUnity(chi, gsq)
