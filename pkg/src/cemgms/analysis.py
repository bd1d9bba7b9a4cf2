"""Error metrics and convergence studies.

Energy errors use the forms of the fine reference's final linearisation
(``kappa`` and ``K`` of its last Picard solve).  A zero reference norm makes
the relative error undefined; it is reported as NaN.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from .assembly import (
    assemble_b,
    load_vector,
    mass_form,
    model_source,
    model_source_vector,
    strain_stiffness,
    strain_stiffness_form,
)
from .basis import build_aux_space, build_offline_space
from .constitutive import BetaField, MaterialParams
from .grid import ConfigurationError, FineMesh, build_coarse_grid, partition_of_unity
from .solvers import (
    PoroProblem,
    PoroStepper,
    SolveConfig,
    adaptive_enrich,
    fine_space,
    initial_state,
    static_picard_fine,
    static_picard_ms,
    time_loop,
)

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
CSV_COLUMNS = ("mode", "model", "J", "J_online", "H", "m", "e_u_L2", "e_u_a",
               "e_p_L2", "e_p_b", "picard_total", "wall_s")


@dataclass
class ErrorReport:
    mode: str
    model: str
    J: int
    J_online: int
    H: float
    m: int
    e_u_L2: float = math.nan
    e_u_a: float = math.nan
    e_p_L2: float = math.nan
    e_p_b: float = math.nan
    picard_total: int = 0
    wall_s: float = 0.0
    metadata: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        """Basis count as in the tables: ``"4"`` or ``"4+1"``."""
        return f"{self.J}+{self.J_online}" if self.mode == "online" else str(self.J)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("metadata")
        return d


def relative_error(x, x_ref, M) -> float:
    """``sqrt((x - x_ref)^T M (x - x_ref) / x_ref^T M x_ref)``; NaN if the
    reference norm vanishes."""
    x = np.asarray(x, dtype=float)
    x_ref = np.asarray(x_ref, dtype=float)
    den = float(x_ref @ (M @ x_ref))
    if not den > 0.0:
        return math.nan
    e = x - x_ref
    return math.sqrt(max(float(e @ (M @ e)), 0.0) / den)


def error_norms(u_ms, u_h, p_ms=None, p_h=None, A=None, B=None, mass_u=None, mass_p=None) -> dict:
    """Relative L2 and energy errors of displacement (and pressure)."""
    out = {}
    if mass_u is not None:
        out["e_u_L2"] = relative_error(u_ms, u_h, mass_u)
    if A is not None:
        out["e_u_a"] = relative_error(u_ms, u_h, A)
    if p_ms is not None:
        if mass_p is not None:
            out["e_p_L2"] = relative_error(p_ms, p_h, mass_p)
        if B is not None:
            out["e_p_b"] = relative_error(p_ms, p_h, B)
    return out


def m_rule(H: float) -> int:
    """Oversampling layers ``floor(3 log(H) / log(sqrt2/10))``: 3, 4, 5 for
    ``H = sqrt2/10, sqrt2/20, sqrt2/40``."""
    return int(math.floor(3.0 * math.log(H) / math.log(SQRT2 / 10.0) + 1e-9))


def coarse_count(H: float) -> int:
    """Coarse blocks per axis for ``H = sqrt2 / Nc``."""
    nc = SQRT2 / H
    if abs(nc - round(nc)) > 1e-6:
        raise ConfigurationError(f"H={H} is not sqrt(2)/Nc for an integer Nc")
    return int(round(nc))


# ---------------------------------------------------------------- references

@dataclass
class ElasticReference:
    u: np.ndarray
    kappa: np.ndarray
    iterations: int
    A: object
    mass: object


def elastic_reference(mesh: FineMesh, beta: BetaField, b, cfg: SolveConfig) -> ElasticReference:
    r = static_picard_fine(mesh, beta, b, cfg)
    return ElasticReference(r.u, r.kappa, r.iterations, strain_stiffness(mesh, r.kappa),
                            mass_form(mesh, 1.0, "vector2").assemble())


@dataclass
class PoroReference:
    u: np.ndarray
    p: np.ndarray
    picard: list
    A: object
    B: object
    mass_u: object
    mass_p: object


def poro_reference(problem: PoroProblem, cfg: SolveConfig, p0=None) -> PoroReference:
    mesh = problem.mesh
    V, Q = fine_space(mesh, "vector2"), fine_space(mesh, "scalar")
    traj = time_loop(initial_state(problem, V, Q, p0), problem.params.steps, PoroStepper(problem, V, Q, cfg))
    last = traj[-1]
    if last.kappa is None:  # zero steps
        kap, K = PoroStepper(problem, V, Q, cfg).coefficients(last.u, last.p)
    else:
        kap, K = last.kappa, last.K
    return PoroReference(last.u, last.p, [s.picard for s in traj[1:]],
                         strain_stiffness(mesh, kap), assemble_b(mesh, K),
                         mass_form(mesh, 1.0, "vector2").assemble(), mass_form(mesh, 1.0, "scalar").assemble())


# ---------------------------------------------------------------- multiscale runs

@dataclass(frozen=True)
class BasisConfig:
    J: int = 4
    online_sweeps: int = 0
    layers: int | None = None  # None: m_rule(H)
    relaxed: bool = True
    rebuild: bool = False
    online_layers: int = 2


def _setup(mesh, nc):
    grid = build_coarse_grid(mesh, nc)
    return grid, partition_of_unity(grid, mesh)


def elastic_space(mesh, grid, pou, kappa, J, m, relaxed=True):
    aux = build_aux_space(grid, pou, kappa, "vector2", J)
    return aux, build_offline_space(grid, aux, strain_stiffness(mesh, kappa), m, relaxed)


def run_elasticity(mesh, beta, b, nc, basis: BasisConfig, cfg: SolveConfig, ref: ElasticReference,
                   model: str = "", mode: str = "elasticity") -> ErrorReport:
    t0 = time.perf_counter()
    grid, pou = _setup(mesh, nc)
    m = basis.layers if basis.layers is not None else m_rule(grid.H)
    aux, V = elastic_space(mesh, grid, pou, 1.0, basis.J, m, basis.relaxed)
    residuals = []
    if basis.online_sweeps:
        form = strain_stiffness_form(mesh, 1.0)
        V, residuals = adaptive_enrich(V, grid, pou, aux, form, b, mesh.dof_map("vector2").free_dofs,
                                       basis.online_sweeps, basis.online_layers)
    rebuild = None
    if basis.rebuild:
        def rebuild(kap):
            return elastic_space(mesh, grid, pou, kap, basis.J, m, basis.relaxed)[1]
    res = static_picard_ms(mesh, beta, b, V, cfg, grid=grid, rebuild=rebuild)
    errs = error_norms(res.u, ref.u, A=ref.A, mass_u=ref.mass)
    wall = time.perf_counter() - t0
    rep = ErrorReport(mode, model, basis.J, basis.online_sweeps, grid.H, m, picard_total=res.iterations,
                      wall_s=wall, **errs)
    rep.metadata.update(dim=V.dim, residuals=residuals, picard_history=res.history,
                        energy_forms="fine reference, final linearisation", u=res.u, u_ref=ref.u)
    return rep


def run_poroelasticity(problem: PoroProblem, nc, basis: BasisConfig, cfg: SolveConfig, ref: PoroReference,
                       model: str = "", p0=None) -> ErrorReport:
    t0 = time.perf_counter()
    mesh = problem.mesh
    grid, pou = _setup(mesh, nc)
    m = basis.layers if basis.layers is not None else m_rule(grid.H)

    def spaces(kap, K):
        aux_v = build_aux_space(grid, pou, kap, "vector2", basis.J)
        aux_q = build_aux_space(grid, pou, K, "scalar", basis.J)
        return (build_offline_space(grid, aux_v, strain_stiffness(mesh, kap), m, basis.relaxed),
                build_offline_space(grid, aux_q, assemble_b(mesh, K), m, basis.relaxed))

    V, Q = spaces(1.0, problem.permeability(np.zeros(mesh.n_nodes)))
    rebuild = spaces if basis.rebuild else None
    stepper = PoroStepper(problem, V, Q, cfg, grid=grid, rebuild=rebuild)
    traj = time_loop(initial_state(problem, V, Q, p0, grid=grid), problem.params.steps, stepper)
    last = traj[-1]
    errs = error_norms(last.u, ref.u, last.p, ref.p, ref.A, ref.B, ref.mass_u, ref.mass_p)
    picard = [s.picard for s in traj[1:]]
    rep = ErrorReport("poroelasticity", model, basis.J, 0, grid.H, m, picard_total=int(sum(picard)),
                      wall_s=time.perf_counter() - t0, **errs)
    rep.metadata.update(picard_per_step=picard, dim=(V.dim, Q.dim), u=last.u, p=last.p, u_ref=ref.u, p_ref=ref.p,
                        energy_forms="fine reference, final linearisation")
    return rep


def convergence_study(mesh: FineMesh, beta: BetaField, H_list: Iterable[float], basis: BasisConfig,
                      cfg: SolveConfig = SolveConfig(), mode: str = "elasticity", model: str = "",
                      params: MaterialParams | None = None, source=None, online_configs=((6, 0), (4, 1), (4, 2)),
                      on_report: Callable[[ErrorReport], None] | None = None) -> list:
    """One row per ``H`` (elasticity, poroelasticity) or per online configuration.

    ``online`` mode uses the first ``H`` and ``online_configs`` as
    ``(J offline, online sweeps)`` pairs.  ``on_report`` is called as rows
    complete so that partial results survive a failure.
    """
    reports = []

    def emit(rep):
        reports.append(rep)
        if on_report is not None:
            on_report(rep)

    H_list = list(H_list)
    if mode in ("elasticity", "online"):
        b = load_vector(mesh, model_source_vector if source is None else source, "vector2")
        ref = elastic_reference(mesh, beta, b, cfg)
        if mode == "elasticity":
            for H in H_list:
                emit(run_elasticity(mesh, beta, b, coarse_count(H), basis, cfg, ref, model))
        else:
            nc = coarse_count(H_list[0])
            for J, k in online_configs:
                cfg_b = BasisConfig(J, k, basis.layers, basis.relaxed, basis.rebuild, basis.online_layers)
                emit(run_elasticity(mesh, beta, b, nc, cfg_b, cfg, ref, model, mode="online"))
    elif mode == "poroelasticity":
        params = MaterialParams() if params is None else params
        F = load_vector(mesh, model_source if source is None else source, "scalar")
        problem = PoroProblem(mesh, beta, params, F)
        ref = poro_reference(problem, cfg)
        for H in H_list:
            emit(run_poroelasticity(problem, coarse_count(H), basis, cfg, ref, model))
    else:
        raise ConfigurationError(f"unknown study mode {mode!r}")
    return reports
