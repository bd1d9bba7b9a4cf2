"""Command-line driver: experiments, error tables and raster dumps.

Exit codes: 0 success, 2 configuration error, 3 Picard non-convergence.
Rows of ``errors.csv`` are appended as soon as each run finishes, so a failed
study keeps the rows it completed.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import CSV_COLUMNS, ErrorReport, convergence_study, m_rule
from .assembly import assemble_b, strain_stiffness
from .basis import build_aux_space, build_offline_space
from .config import MODES, RunConfig, defaults_help, load_config, parse_online_configs
from .constitutive import BetaField, ParameterError
from .grid import ConfigurationError, build_coarse_grid, build_fine_mesh, partition_of_unity
from .models import RasterError, load_or_generate_beta, nodal_raster, write_grid
from .solvers import NonConvergenceError

log = logging.getLogger("cemgms")

ENV_OUT = "CEMGMS_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE = 0, 2, 3
COMMANDS = ("elasticity", "elasticity-online", "poroelasticity", "convergence-study", "basis-dump")


class CsvSink:
    """Append-only ``errors.csv`` with a fixed header."""

    def __init__(self, path: Path):
        self.path = Path(path)
        if self.path.exists() and self.path.stat().st_size > 0:
            with self.path.open(newline="") as fh:
                header = next(csv.reader(fh), [])
            if tuple(header) != CSV_COLUMNS:
                raise ConfigurationError(f"{self.path} has an incompatible header {header}")
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(CSV_COLUMNS)

    def write(self, rep: ErrorReport) -> None:
        row = rep.row()
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_cell(row[c]) for c in CSV_COLUMNS])
            fh.flush()


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_errors_csv(path) -> list:
    """Rows of ``errors.csv`` as dicts with numeric fields converted."""
    ints = {"J", "J_online", "m", "picard_total"}
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({k: (int(v) if k in ints else v if k in ("mode", "model") else float(v))
                        for k, v in row.items()})
    return out


# ---------------------------------------------------------------- arguments

def _int_list(text):
    try:
        return tuple(int(t) for t in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None


def _layers(text):
    if text.strip().lower() == "auto":
        return "auto"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'auto', got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file (flags override it)")
    common.add_argument("--nx", type=int, help="fine cells per axis")
    common.add_argument("--coarse", type=_int_list, help="coarse blocks per axis, e.g. 10 or 10,20,40")
    common.add_argument("--layers", type=_layers, help="oversampling layers m, or 'auto' for the m rule")
    common.add_argument("--basis", type=int, help="offline basis functions J per block")
    common.add_argument("--online-sweeps", type=int, help="online enrichment sweeps")
    common.add_argument("--delta0", type=float, help="Picard tolerance")
    common.add_argument("--tau", type=float, help="time step")
    common.add_argument("--steps", type=int, help="number of time steps")
    common.add_argument("--model", help="beta raster file or generator spec, e.g. blobs(7)")
    common.add_argument("--source", choices=("model", "zero"), help="right-hand side")
    common.add_argument("--solver", choices=("direct", "cg"), help="linear solver")
    common.add_argument("--out", help=f"output directory (overrides ${ENV_OUT} and the config)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-vv for debug)")

    p = argparse.ArgumentParser(
        prog="cemgms",
        description="Multiscale solvers for strain-limiting elasticity and nonlinear poroelasticity.",
        epilog=defaults_help() + f"\n\nenvironment: {ENV_OUT} sets the output directory."
               "\nexit codes: 0 success, 2 configuration error, 3 non-convergence.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("elasticity", parents=[common], help="static problem at the first coarse size")
    online = sub.add_parser("elasticity-online", parents=[common], help="online enrichment study (e.g. 6+0, 4+1, 4+2)")
    online.add_argument("--configs", help="J+sweeps list, e.g. 6+0,4+1,4+2")
    sub.add_parser("poroelasticity", parents=[common], help="time-dependent coupled problem at the first coarse size")
    study = sub.add_parser("convergence-study", parents=[common], help="one row per coarse size")
    study.add_argument("--mode", choices=MODES, help="problem to study")
    dump = sub.add_parser("basis-dump", parents=[common], help="write offline basis functions as rasters")
    dump.add_argument("--index", type=int, default=0, help="basis column to dump")
    return p


def resolve_config(args) -> RunConfig:
    """Config file (or defaults), then ``$CEMGMS_OUT``, then explicit flags."""
    cfg = load_config(args.config) if args.config else RunConfig()
    over = dict(nx=args.nx, coarse=args.coarse, J=args.basis, online_sweeps=args.online_sweeps,
                delta0=args.delta0, tau=args.tau, steps=args.steps, model=args.model, source=args.source,
                linear_solver=args.solver, mode=getattr(args, "mode", None),
                out=args.out or os.environ.get(ENV_OUT))
    over = {k: v for k, v in over.items() if v is not None}
    if args.layers is not None:
        over["layers"] = None if args.layers == "auto" else args.layers
    if getattr(args, "configs", None):
        try:
            over["online_configs"] = parse_online_configs(args.configs)
        except ValueError as exc:
            raise ConfigurationError(f"invalid --configs {args.configs!r} ({exc})") from None
    return replace(cfg, **over)


# ---------------------------------------------------------------- commands

def _dump_vector(fields_dir: Path, mesh, tag: str, u) -> None:
    u = np.asarray(u)
    write_grid(fields_dir / f"{tag}_ux.grid", nodal_raster(mesh, u[0::2]))
    write_grid(fields_dir / f"{tag}_uy.grid", nodal_raster(mesh, u[1::2]))


def _dump_scalar(fields_dir: Path, mesh, tag: str, p) -> None:
    write_grid(fields_dir / f"{tag}_p.grid", nodal_raster(mesh, p))


def _setup(cfg: RunConfig):
    mesh = build_fine_mesh(cfg.nx, cfg.ny_eff)
    raster = load_or_generate_beta(cfg.model, cfg.nx, cfg.ny_eff)
    beta = BetaField(raster.cell_values(mesh))
    return mesh, beta


def run_study(cfg: RunConfig, mode: str, coarse: tuple) -> int:
    out = Path(cfg.out)
    fields_dir = out / "fields"
    fields_dir.mkdir(parents=True, exist_ok=True)
    sink = CsvSink(out / "errors.csv")
    mesh, beta = _setup(cfg)
    if cfg.source == "zero":
        source = 0.0 if mode == "poroelasticity" else np.zeros(2)
    else:
        source = None
    dumped_ref = []

    def on_report(rep: ErrorReport):
        sink.write(rep)
        md = rep.metadata
        nc = int(round(math.sqrt(2.0) / rep.H))
        tag = f"{rep.mode}_{rep.label}_Nc{nc}"
        _dump_vector(fields_dir, mesh, tag, md["u"])
        if "p" in md:
            _dump_scalar(fields_dir, mesh, tag, md["p"])
        if not dumped_ref:
            _dump_vector(fields_dir, mesh, f"{rep.mode}_fine", md["u_ref"])
            if "p_ref" in md:
                _dump_scalar(fields_dir, mesh, f"{rep.mode}_fine", md["p_ref"])
            dumped_ref.append(True)
        print(f"{rep.mode:<15} J={rep.label:<5} H={rep.H:.5f} m={rep.m} e_u_L2={rep.e_u_L2:.4e} "
              f"e_u_a={rep.e_u_a:.4e} e_p_L2={rep.e_p_L2:.4e} e_p_b={rep.e_p_b:.4e} "
              f"picard={rep.picard_total} wall={rep.wall_s:.1f}s", flush=True)

    H_list = [math.sqrt(2.0) / n for n in coarse]
    convergence_study(mesh, beta, H_list, cfg.basis_config(), cfg.solve_config(), mode=mode, model=cfg.model,
                      params=cfg.material(), source=source, online_configs=cfg.online_configs,
                      on_report=on_report)
    return EXIT_OK


def run_basis_dump(cfg: RunConfig, index: int) -> int:
    fields_dir = Path(cfg.out) / "fields"
    fields_dir.mkdir(parents=True, exist_ok=True)
    mesh, _ = _setup(cfg)
    nc = cfg.coarse[0]
    grid = build_coarse_grid(mesh, nc)
    pou = partition_of_unity(grid, mesh)
    m = cfg.layers if cfg.layers is not None else m_rule(grid.H)
    K0 = cfg.material().permeability(np.zeros(mesh.n_cells))
    for kind, coef, A in (("vector2", 1.0, strain_stiffness(mesh, 1.0)), ("scalar", K0, assemble_b(mesh, K0))):
        aux = build_aux_space(grid, pou, coef, kind, cfg.J)
        space = build_offline_space(grid, aux, A, m, cfg.relaxed)
        if not 0 <= index < space.dim:
            raise ConfigurationError(f"basis index {index} outside [0, {space.dim})")
        col = space.P[:, index].toarray().ravel()
        tag = f"basis_{index}_Nc{nc}_m{m}"
        if kind == "vector2":
            _dump_vector(fields_dir, mesh, tag, col)
        else:
            _dump_scalar(fields_dir, mesh, tag, col)
        print(f"{kind} basis {index} of {space.dim} written to {fields_dir}", flush=True)
    return EXIT_OK


def run_experiment(cfg: RunConfig, command: str, index: int = 0) -> int:
    if command == "basis-dump":
        return run_basis_dump(cfg, index)
    if command == "convergence-study":
        return run_study(cfg, cfg.mode, cfg.coarse)
    mode = {"elasticity": "elasticity", "elasticity-online": "online", "poroelasticity": "poroelasticity"}[command]
    return run_study(cfg, mode, cfg.coarse[:1])


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return run_experiment(cfg, args.command, getattr(args, "index", 0))
    except (ConfigurationError, ParameterError, RasterError) as exc:
        print(f"cemgms: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergenceError as exc:
        print(f"cemgms: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
