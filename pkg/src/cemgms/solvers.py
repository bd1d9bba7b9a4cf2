"""Picard iteration and backward-Euler time stepping, fine and multiscale.

Every solve is posed on a space ``P`` (columns on global fine dofs): the fine
problem uses the identity space on the free dofs, the multiscale problem the
CEM basis.  Coefficients are refreshed from the prolonged fine field.

The poroelastic step solves, per Picard iteration, the block system
(second row multiplied by ``tau``)

    [ A_n    -D^T      ] [u]   [ 0                           ]
    [ D      C + tau B ] [p] = [ tau F + D u_s + C p_s        ]
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import (
    ElementForm,
    cell_average,
    coupling_form,
    kappa_field,
    mass_form,
    scalar_stiffness_form,
    strain_stiffness_form,
)
from .basis import MsSpace, online_sweep
from .constitutive import BetaField, MaterialParams, Permeability
from .galerkin import BlockProjector, sparse_galerkin
from .grid import CoarseGrid, FineMesh

log = logging.getLogger(__name__)

_RANK_TOL = 1e-11


MIN_STEP_PICARD = 2


class NonConvergenceError(RuntimeError):
    """Picard cap reached; ``history`` holds the relative changes."""

    def __init__(self, message, history, partial=None):
        super().__init__(message)
        self.history = list(history)
        self.partial = partial


class LinearSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolveConfig:
    delta0: float = 1e-5
    max_picard: int = 100
    linear_solver: str = "direct"  # "direct" | "cg"
    krylov_tol: float = 1e-10
    norm: str = "energy"  # "energy" | "L2"
    clamp_eps: float = 0.1

    def __post_init__(self):
        if not self.delta0 > 0:
            raise ValueError(f"delta0 must be positive (got {self.delta0})")
        if self.max_picard < 1:
            raise ValueError(f"max_picard must be at least 1 (got {self.max_picard})")
        if self.linear_solver not in ("direct", "cg"):
            raise ValueError(f"linear_solver must be 'direct' or 'cg' (got {self.linear_solver!r})")
        if not 0 < self.krylov_tol < 1:
            raise ValueError(f"krylov_tol must lie in (0, 1) (got {self.krylov_tol})")
        if self.norm not in ("energy", "L2"):
            raise ValueError(f"norm must be 'energy' or 'L2' (got {self.norm!r})")


# ---------------------------------------------------------------- spaces

def fine_space(mesh: FineMesh, kind: str) -> MsSpace:
    dm = mesh.dof_map(kind)
    return MsSpace.identity(dm.free_dofs, dm.n_dofs, kind)


def is_fine(space: MsSpace) -> bool:
    return bool(space.provenance) and all(p.kind == "fine" for p in space.provenance)


class Reducer:
    """Galerkin projection of element forms onto spaces.

    Fine (identity) spaces give sparse matrices; multiscale spaces give dense
    ones assembled block by block (needs the coarse grid).  Passing ``slot``
    reuses one output buffer per slot name; large fresh allocations are the
    dominant cost of a Picard step otherwise.
    """

    def __init__(self, grid: CoarseGrid | None = None):
        self.grid = grid
        self._block = BlockProjector(grid) if grid is not None else None
        self._buffers = {}

    def __call__(self, form: ElementForm, row: MsSpace, col: MsSpace | None = None, slot: str | None = None):
        col = row if col is None else col
        if is_fine(row) and is_fine(col):
            return sparse_galerkin(form.assemble(), row, col)
        if self._block is None:
            return sparse_galerkin(form.assemble(), row, col).toarray()
        out = self._buffers.get(slot) if slot is not None else None
        out = self._block.project(form, row, col, out=out)
        if slot is not None:
            self._buffers[slot] = out
        return out


def _quad(M, x) -> float:
    return float(x @ (M @ x))


def _relative_change(M, new, old) -> float:
    d = new - old
    den = _quad(M, old)
    if den <= 0.0:
        den = _quad(M, new)
    if den <= 0.0:
        return 0.0
    return float(np.sqrt(max(_quad(M, d), 0.0) / den))


# ---------------------------------------------------------------- linear algebra

def _dense_spd_solve(M: np.ndarray, rhs: np.ndarray, work: np.ndarray | None = None) -> np.ndarray:
    """Cholesky, or an eigenvalue-truncated solve if ``M`` is (nearly) singular.

    ``work`` (Fortran-ordered, same shape) receives the factor; ``M`` is kept.
    """
    try:
        if work is None:
            c, low = sla.cho_factor(M, check_finite=False)
        else:
            np.copyto(work, M)
            c, low = sla.cho_factor(work, overwrite_a=True, check_finite=False)
        d = np.abs(np.diag(c))
        if d.min() ** 2 > _RANK_TOL * d.max() ** 2:
            return sla.cho_solve((c, low), rhs, check_finite=False)
    except sla.LinAlgError:
        pass
    log.debug("reduced matrix is rank deficient; using truncated eigen-solve")
    w, V = sla.eigh(M)
    keep = w > _RANK_TOL * w.max()
    return V[:, keep] @ ((V[:, keep].T @ rhs) / w[keep])


def _dense_general_solve(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    with warnings.catch_warnings():
        warnings.simplefilter("error", sla.LinAlgWarning)
        try:
            return sla.solve(M, rhs, check_finite=False)
        except (sla.LinAlgError, sla.LinAlgWarning):
            pass
    log.debug("reduced block system is rank deficient; using least squares")
    return sla.lstsq(M, rhs, cond=_RANK_TOL)[0]


class SPDSolver:
    """Solves ``M c = r`` for a sequence of Picard matrices ``M``.

    direct: sparse LU or dense Cholesky per call.  cg: preconditioned CG with
    the Cholesky factor of the first matrix frozen as preconditioner.
    """

    def __init__(self, cfg: SolveConfig):
        self.cfg = cfg
        self._pre = None
        self._work = None
        self.krylov_iterations = []

    def __call__(self, M, rhs, x0=None):
        if sp.issparse(M):
            return spla.splu(sp.csc_matrix(M), permc_spec="MMD_AT_PLUS_A").solve(rhs)
        if self.cfg.linear_solver == "direct":
            if self._work is None or self._work.shape != M.shape:
                self._work = np.empty(M.shape, order="F")
            return _dense_spd_solve(M, rhs, self._work)
        if self._pre is None:
            self._pre = sla.cho_factor(M, check_finite=False)
        pre = spla.LinearOperator(M.shape, matvec=lambda r: sla.cho_solve(self._pre, r, check_finite=False))
        count = [0]
        x, info = spla.cg(M, rhs, x0=x0, rtol=self.cfg.krylov_tol, atol=0.0, M=pre,
                          maxiter=10 * M.shape[0], callback=lambda _: count.__setitem__(0, count[0] + 1))
        if info != 0:
            raise LinearSolveError(f"conjugate gradient did not reach rtol={self.cfg.krylov_tol} (info={info})")
        self.krylov_iterations.append(count[0])
        return x


class BlockSolver:
    """Solves the linearised poroelastic block system (fine or reduced)."""

    def __init__(self, cfg: SolveConfig, alpha: float = 1.0):
        self.cfg = cfg
        self.alpha = alpha
        self._pre = None
        self.krylov_iterations = []

    def __call__(self, A, D, E, ru, rp, x0=None, mass_p=None):
        nu = ru.size
        rhs = np.concatenate([ru, rp])
        if sp.issparse(A):
            K = sp.bmat([[A, -D.T], [D, E]], format="csc")
            x = spla.splu(K, permc_spec="MMD_AT_PLUS_A").solve(rhs)
            return x[:nu], x[nu:]
        if self.cfg.linear_solver == "direct":
            return self._schur(A, D, E, ru, rp)
        return self._gmres(A, D, E, rhs, nu, x0, mass_p)

    def _schur(self, A, D, E, ru, rp):
        # u = A^{-1}(ru + D^T p);  (E + D A^{-1} D^T) p = rp - D A^{-1} ru
        try:
            cA = sla.cho_factor(A, check_finite=False)
            d = np.abs(np.diag(cA[0]))
            if d.min() ** 2 > _RANK_TOL * d.max() ** 2:
                X = sla.cho_solve(cA, np.column_stack([D.T, ru]), check_finite=False)
                S = E + D @ X[:, :-1]
                S = 0.5 * (S + S.T)
                p = _dense_spd_solve(S, rp - D @ X[:, -1])
                u = X[:, -1] + X[:, :-1] @ p
                return u, p
        except sla.LinAlgError:
            pass
        K = np.block([[A, -D.T], [D, E]])
        x = _dense_general_solve(K, np.concatenate([ru, rp]))
        return x[:ru.size], x[ru.size:]

    def _gmres(self, A, D, E, rhs, nu, x0, mass_p):
        if self._pre is None:
            # D A^{-1} D^T is spectrally close to alpha^2 times the pressure mass
            S0 = E + (self.alpha ** 2) * (mass_p if mass_p is not None else 0.0)
            self._pre = (sla.cho_factor(A, check_finite=False), sla.cho_factor(S0, check_finite=False))
        cA, cS = self._pre

        def precond(r):
            yu = sla.cho_solve(cA, r[:nu], check_finite=False)
            yp = sla.cho_solve(cS, r[nu:] - D @ yu, check_finite=False)
            return np.concatenate([yu, yp])

        def matvec(x):
            u, p = x[:nu], x[nu:]
            return np.concatenate([A @ u - D.T @ p, D @ u + E @ p])

        n = rhs.size
        op = spla.LinearOperator((n, n), matvec=matvec)
        pre = spla.LinearOperator((n, n), matvec=precond)
        count = [0]
        x, info = spla.gmres(op, rhs, x0=x0, rtol=self.cfg.krylov_tol, atol=0.0, M=pre, restart=200,
                             maxiter=50, callback=lambda _: count.__setitem__(0, count[0] + 1),
                             callback_type="pr_norm")
        if info != 0:
            raise LinearSolveError(f"GMRES did not reach rtol={self.cfg.krylov_tol} (info={info})")
        self.krylov_iterations.append(count[0])
        return x[:nu], x[nu:]


# ---------------------------------------------------------------- static elasticity

@dataclass
class PicardResult:
    """Converged Picard solve.  ``kappa`` is the coefficient of the last solve."""

    u: np.ndarray
    coeffs: np.ndarray
    iterations: int
    history: list
    history_energy: list
    history_l2: list
    kappa: np.ndarray
    space: MsSpace


def static_picard_ms(mesh: FineMesh, beta: BetaField, b: np.ndarray, space: MsSpace,
                     cfg: SolveConfig = SolveConfig(), grid: CoarseGrid | None = None,
                     rebuild: Callable[[np.ndarray], MsSpace] | None = None) -> PicardResult:
    """Picard iteration for ``a_n(u^{n+1}, v) = (f, v)`` in ``span(P)``, from ``u = 0``.

    ``b`` is the global load vector.  ``rebuild(kappa)`` (optional) returns the
    space to use at each iteration; changes are then measured on fine fields.
    """
    reducer = Reducer(grid)
    solve = SPDSolver(cfg)
    mass = mass_form(mesh, 1.0, "vector2")
    M = reducer(mass, space)
    u = np.zeros(b.size)
    c = np.zeros(space.dim)
    hist, hist_e, hist_l2 = [], [], []
    for it in range(1, cfg.max_picard + 1):
        kap = kappa_field(mesh, beta, u, cfg.clamp_eps)
        form = strain_stiffness_form(mesh, kap)
        if rebuild is not None:
            space = rebuild(kap)
            Ar = reducer(form, space)
            c_new = solve(Ar, space.P.T @ b)
            u_new = space.prolong(c_new)
            ch_e = _relative_change(form.assemble(), u_new, u)
            ch_l2 = _relative_change(mass.assemble(), u_new, u)
        else:
            Ar = reducer(form, space, slot="A")
            c_new = solve(Ar, space.P.T @ b, x0=c)
            u_new = space.prolong(c_new)
            ch_e = _relative_change(Ar, c_new, c)
            ch_l2 = _relative_change(M, c_new, c)
        change = ch_e if cfg.norm == "energy" else ch_l2
        hist.append(change)
        hist_e.append(ch_e)
        hist_l2.append(ch_l2)
        log.debug("picard %d: energy %.3e, L2 %.3e", it, ch_e, ch_l2)
        u, c = u_new, c_new
        if change < cfg.delta0:
            return PicardResult(u, c, it, hist, hist_e, hist_l2, kap, space)
    raise NonConvergenceError(f"Picard iteration did not reach delta0={cfg.delta0} in {cfg.max_picard} iterations",
                              hist, PicardResult(u, c, cfg.max_picard, hist, hist_e, hist_l2, kap, space))


def static_picard_fine(mesh: FineMesh, beta: BetaField, b: np.ndarray,
                       cfg: SolveConfig = SolveConfig()) -> PicardResult:
    return static_picard_ms(mesh, beta, b, fine_space(mesh, "vector2"), cfg)


def galerkin_solve(A: sp.spmatrix, b: np.ndarray, space: MsSpace, grid: CoarseGrid | None = None,
                   form: ElementForm | None = None) -> np.ndarray:
    """Linear Galerkin solution ``P (P^T A P)^{-1} P^T b`` as a fine vector."""
    if form is not None:
        Ar = Reducer(grid)(form, space)
    else:
        Ar = space.P.T @ (A @ space.P)
        Ar = Ar.toarray() if sp.issparse(Ar) and not is_fine(space) else Ar
    rhs = space.P.T @ b
    c = (spla.splu(sp.csc_matrix(Ar)).solve(rhs) if sp.issparse(Ar) else _dense_spd_solve(Ar, rhs))
    return space.prolong(c)


def adaptive_enrich(space: MsSpace, grid: CoarseGrid, pou, aux, form: ElementForm, b: np.ndarray,
                    free_dofs: np.ndarray, steps: int, layers: int = 2):
    """Residual-driven online enrichment at a fixed linearisation.

    Each sweep solves in the current space, adds one online basis per interior
    coarse vertex, and records the dual residual norm.  Returns the enriched
    space and the list of residual norms (one per sweep, before enrichment).
    """
    A = form.assemble()
    reducer = Reducer(grid)

    def solve(sp_):
        Ar = reducer(form, sp_)
        return sp_.prolong(_dense_spd_solve(Ar, sp_.P.T @ b))

    residuals = []
    for k in range(steps):
        space, _, r = online_sweep(space, grid, pou, aux, A, b, free_dofs, solve, layers=layers, sweep=k + 1)
        residuals.append(float(np.linalg.norm(r)))
    return space, residuals


# ---------------------------------------------------------------- poroelasticity

@dataclass
class PoroState:
    """Displacement/pressure at time level ``s`` (fine fields plus coefficients)."""

    u: np.ndarray
    p: np.ndarray
    s: int = 0
    cu: np.ndarray | None = None
    cp: np.ndarray | None = None
    picard: int = 0
    history: list = field(default_factory=list)
    kappa: np.ndarray | None = None
    K: np.ndarray | None = None


@dataclass(eq=False)
class PoroProblem:
    mesh: FineMesh
    beta: BetaField
    params: MaterialParams
    source: np.ndarray  # scalar load vector (f, q) on global pressure dofs

    def permeability(self, p: np.ndarray) -> np.ndarray:
        return self.params.permeability(cell_average(self.mesh, p))


class PoroStepper:
    """One backward-Euler step with Picard iteration, on a pair of spaces."""

    def __init__(self, problem: PoroProblem, V: MsSpace, Q: MsSpace, cfg: SolveConfig = SolveConfig(),
                 grid: CoarseGrid | None = None,
                 rebuild: Callable[[np.ndarray, np.ndarray], tuple] | None = None):
        self.problem = problem
        self.cfg = cfg
        self.reducer = Reducer(grid)
        self.rebuild = rebuild
        self._E = None  # reused C + tau B buffer
        mesh, par = problem.mesh, problem.params
        self._C_fine = mass_form(mesh, 1.0 / par.M, "scalar").assemble()
        self._D_fine = coupling_form(mesh, par.alpha).assemble()
        self._set_spaces(V, Q)

    def _set_spaces(self, V, Q):
        mesh, par = self.problem.mesh, self.problem.params
        self.V, self.Q = V, Q
        self.C = self.reducer(mass_form(mesh, 1.0 / par.M, "scalar"), Q)
        self.D = self.reducer(coupling_form(mesh, par.alpha), Q, V)
        self.Mp = self.reducer(mass_form(mesh, 1.0, "scalar"), Q)
        self.Mu = self.reducer(mass_form(mesh, 1.0, "vector2"), V)
        self.block = BlockSolver(self.cfg, par.alpha)

    @staticmethod
    def _coeffs(space, M, x, c):
        if c is not None and c.size == space.dim:
            return c
        if is_fine(space):
            return space.P.T @ x
        return _project_l2(M, space, x)

    def coefficients(self, u, p):
        kap = kappa_field(self.problem.mesh, self.problem.beta, u, self.cfg.clamp_eps)
        return kap, self.problem.permeability(p)

    def operators(self, kap, K):
        mesh = self.problem.mesh
        A = self.reducer(strain_stiffness_form(mesh, kap), self.V, slot="A")
        B = self.reducer(scalar_stiffness_form(mesh, K), self.Q, slot="B")
        return A, B

    def step(self, state: PoroState) -> PoroState:
        tau = self.problem.params.tau
        g = tau * self.problem.source + self._D_fine @ state.u + self._C_fine @ state.p
        rp = self.Q.P.T @ g
        u, p = state.u, state.p
        cu = self._coeffs(self.V, self.Mu, u, state.cu)
        cp = self._coeffs(self.Q, self.Mp, p, state.cp)
        hist = []
        for it in range(1, self.cfg.max_picard + 1):
            kap, K = self.coefficients(u, p)
            if self.rebuild is not None:
                V, Q = self.rebuild(kap, K)
                if V is not self.V or Q is not self.Q:
                    self._set_spaces(V, Q)
                    rp = self.Q.P.T @ g
                    cu, cp = _project_l2(self.Mu, V, u), _project_l2(self.Mp, Q, p)
            A, B = self.operators(kap, K)
            E = self._E = _axpy_into(self._E, tau, B, self.C)
            x0 = np.concatenate([cu, cp]) if self.cfg.linear_solver == "cg" else None
            cu_new, cp_new = self.block(A, self.D, E, np.zeros(self.V.dim), rp, x0=x0, mass_p=self.Mp)
            if self.cfg.norm == "energy":
                du = _relative_change(A, cu_new, cu)
                dp = _relative_change(B, cp_new, cp)
            else:
                du = _relative_change(self.Mu, cu_new, cu)
                dp = _relative_change(self.Mp, cp_new, cp)
            hist.append((du, dp))
            cu, cp = cu_new, cp_new
            u, p = self.V.prolong(cu), self.Q.prolong(cp)
            log.debug("step %d picard %d: du %.3e dp %.3e", state.s + 1, it, du, dp)
            # the start guess is not an iterate of this step, so two solves must agree
            if it >= MIN_STEP_PICARD and du < self.cfg.delta0 and dp < self.cfg.delta0:
                return PoroState(u, p, state.s + 1, cu, cp, it, hist, kap, K)
        partial = PoroState(u, p, state.s + 1, cu, cp, self.cfg.max_picard, hist, kap, K)
        raise NonConvergenceError(
            f"time step {state.s + 1}: Picard iteration did not reach delta0={self.cfg.delta0} "
            f"in {self.cfg.max_picard} iterations", hist, partial)

    __call__ = step


def _axpy_into(out, a, X, Y):
    """``a X + Y``, reusing ``out`` for dense operands."""
    if sp.issparse(X) or out is None or out.shape != X.shape:
        return a * X + Y
    np.multiply(X, a, out=out)
    out += Y
    return out


def _project_l2(M, space, x):
    rhs = space.P.T @ x
    if sp.issparse(M):
        return spla.splu(sp.csc_matrix(M)).solve(rhs)
    return _dense_spd_solve(M, rhs)


def poro_step_fine(state: PoroState, problem: PoroProblem, cfg: SolveConfig = SolveConfig()) -> PoroState:
    mesh = problem.mesh
    return PoroStepper(problem, fine_space(mesh, "vector2"), fine_space(mesh, "scalar"), cfg).step(state)


def poro_step_ms(state: PoroState, problem: PoroProblem, spaces, cfg: SolveConfig = SolveConfig(),
                 grid: CoarseGrid | None = None) -> PoroState:
    V, Q = spaces
    return PoroStepper(problem, V, Q, cfg, grid).step(state)


def initial_state(problem: PoroProblem, V: MsSpace, Q: MsSpace, p0=None,
                  grid: CoarseGrid | None = None) -> PoroState:
    """Initial pressure and displacement in ``(V, Q)``.

    Pressure: ``b``-orthogonal projection of ``p0`` (``K`` at ``p0``); for the
    fine space this is ``p0`` itself.  Displacement: ``a(u0, v) = d(v, p0)``
    with ``kappa = 1``.
    """
    mesh = problem.mesh
    n_p = mesh.n_nodes
    p0 = np.zeros(n_p) if p0 is None else np.asarray(p0, dtype=float)
    if not np.any(p0):
        return PoroState(np.zeros(2 * n_p), np.zeros(n_p), 0, np.zeros(V.dim), np.zeros(Q.dim))
    reducer = Reducer(grid)
    B_form = scalar_stiffness_form(mesh, problem.permeability(p0))
    Br = reducer(B_form, Q)
    rhs = Q.P.T @ (B_form.assemble() @ p0)
    cp = spla.splu(sp.csc_matrix(Br)).solve(rhs) if sp.issparse(Br) else _dense_spd_solve(Br, rhs)
    p = Q.prolong(cp)
    u, cu = initial_displacement(problem, p, V, grid)
    return PoroState(u, p, 0, cu, cp)


def initial_displacement(problem: PoroProblem, p0: np.ndarray, V: MsSpace, grid: CoarseGrid | None = None):
    """Solve ``a(u0, v) = d(v, p0)`` in ``V`` at ``kappa = 1``; returns ``(u0, coeffs)``."""
    mesh = problem.mesh
    Ar = Reducer(grid)(strain_stiffness_form(mesh, 1.0), V)
    rhs = V.P.T @ (coupling_form(mesh, problem.params.alpha).assemble().T @ p0)
    if not np.any(rhs):
        return np.zeros(V.n_dofs), np.zeros(V.dim)
    c = spla.splu(sp.csc_matrix(Ar)).solve(rhs) if sp.issparse(Ar) else _dense_spd_solve(Ar, rhs)
    return V.prolong(c), c


def time_loop(initial: PoroState, S: int, stepper: Callable[[PoroState], PoroState]) -> list:
    """Apply ``stepper`` ``S`` times; returns the trajectory including the initial state."""
    if S < 0:
        raise ValueError(f"step count must be non-negative (got {S})")
    traj = [initial]
    for _ in range(S):
        traj.append(stepper(traj[-1]))
    return traj
