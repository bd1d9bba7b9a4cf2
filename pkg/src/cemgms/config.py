"""Run configuration: INI files, defaults and validation.

Every key has a default, so an empty (or absent) file is a valid
configuration; the keys that fell back to defaults are recorded and logged.
Unknown sections or keys and out-of-range values are rejected with a message
naming the constraint.
"""
from __future__ import annotations

import configparser
import logging
import math
from io import StringIO
from dataclasses import dataclass, field
from pathlib import Path

from .analysis import BasisConfig
from .constitutive import MaterialParams, ParameterError, Permeability
from .grid import ConfigurationError
from .solvers import SolveConfig

log = logging.getLogger(__name__)

MODES = ("elasticity", "online", "poroelasticity")
SOURCES = ("model", "zero")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple:
    items = [t for t in text.replace(",", " ").split() if t]
    if not items:
        raise ValueError("empty list")
    return tuple(int(t) for t in items)


def _layers(text: str):
    t = text.strip().lower()
    return None if t in ("auto", "rule", "") else int(t)


def parse_online_configs(text: str) -> tuple:
    out = []
    for tok in text.replace(",", " ").split():
        j, _, k = tok.partition("+")
        out.append((int(j), int(k or 0)))
    if not out:
        raise ValueError("empty list")
    return tuple(out)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{j}+{k}" for j, k in value)
        return ",".join(str(v) for v in value)
    return str(value)


# (section, key, field name, parser, help)
SCHEMA = (
    ("mesh", "nx", "nx", int, "fine cells per axis"),
    ("mesh", "ny", "ny", lambda t: None if t.strip().lower() in ("", "auto") else int(t), "fine cells in y (auto: nx)"),
    ("mesh", "coarse", "coarse", _int_list, "coarse blocks per axis; a list for convergence studies"),
    ("material", "model", "model", str, "beta raster file or generator: constant(v), stripes, blobs(seed)"),
    ("material", "alpha", "alpha", float, "Biot coupling coefficient"),
    ("material", "M", "M", float, "Biot modulus"),
    ("material", "permeability", "permeability", str, "exp_of_p (K = exp(p)) or constant"),
    ("material", "K", "K", float, "permeability value for the constant model"),
    ("material", "clamp_eps", "clamp_eps", float, "strain clamp margin"),
    ("material", "source", "source", str, "model (1e-4 sqrt(x^2+y^2+1)) or zero"),
    ("solver", "delta0", "delta0", float, "Picard relative-change tolerance"),
    ("solver", "max_picard", "max_picard", int, "Picard iteration cap per solve/time step"),
    ("solver", "norm", "norm", str, "stopping norm: energy or L2"),
    ("solver", "linear_solver", "linear_solver", str, "direct or cg"),
    ("solver", "krylov_tol", "krylov_tol", float, "relative tolerance of the iterative solver"),
    ("basis", "J", "J", int, "offline basis functions per coarse block"),
    ("basis", "online_sweeps", "online_sweeps", int, "online enrichment sweeps"),
    ("basis", "layers", "layers", _layers, "oversampling layers m (auto: m rule from H)"),
    ("basis", "relaxed", "relaxed", _bool, "relaxed (true) or constrained CEM basis"),
    ("basis", "rebuild", "rebuild", _bool, "rebuild offline bases at every Picard iteration"),
    ("basis", "online_layers", "online_layers", int, "patch layers of online bases"),
    ("basis", "online_configs", "online_configs", parse_online_configs, "J+sweeps pairs of online studies"),
    ("time", "tau", "tau", float, "time step"),
    ("time", "steps", "steps", int, "number of time steps S (T = S tau)"),
    ("output", "out", "out", str, "output directory"),
    ("output", "mode", "mode", str, "convergence-study mode: elasticity, online or poroelasticity"),
)


@dataclass(frozen=True)
class RunConfig:
    nx: int = 120
    ny: int | None = None
    coarse: tuple = (10, 20, 40)
    model: str = "blobs(7)"
    alpha: float = 0.9
    M: float = 1.0e6
    permeability: str = "exp_of_p"
    K: float = 1.0
    clamp_eps: float = 0.1
    source: str = "model"
    delta0: float = 1.0e-5
    max_picard: int = 100
    norm: str = "energy"
    linear_solver: str = "direct"
    krylov_tol: float = 1.0e-10
    J: int = 4
    online_sweeps: int = 0
    layers: int | None = None
    relaxed: bool = True
    rebuild: bool = False
    online_layers: int = 2
    online_configs: tuple = ((6, 0), (4, 1), (4, 2))
    tau: float = 0.05
    steps: int = 20
    out: str = "out"
    mode: str = "elasticity"
    defaults_applied: tuple = field(default=(), compare=False)

    def __post_init__(self):
        self.validate()

    @property
    def ny_eff(self) -> int:
        return self.nx if self.ny is None else self.ny

    def validate(self) -> None:
        def need(ok, msg):
            if not ok:
                raise ConfigurationError(msg)

        need(self.nx >= 1 and self.ny_eff >= 1, "mesh.nx and mesh.ny must be positive")
        need(len(self.coarse) >= 1 and all(n >= 1 for n in self.coarse), "mesh.coarse entries must be positive")
        for n in self.coarse:
            need(self.nx % n == 0 and self.ny_eff % n == 0,
                 f"mesh.coarse={n} must divide nx={self.nx} and ny={self.ny_eff}")
        need(self.delta0 > 0, "solver.delta0 must be positive")
        need(self.max_picard >= 1, "solver.max_picard must be at least 1")
        need(self.norm in ("energy", "L2"), "solver.norm must be 'energy' or 'L2'")
        need(self.linear_solver in ("direct", "cg"), "solver.linear_solver must be 'direct' or 'cg'")
        need(0 < self.krylov_tol < 1, "solver.krylov_tol must lie in (0, 1)")
        need(self.J >= 1, "basis.J must be at least 1")
        need(self.online_sweeps >= 0, "basis.online_sweeps must be non-negative")
        need(self.layers is None or self.layers >= 0, "basis.layers must be non-negative or auto")
        need(self.online_layers >= 0, "basis.online_layers must be non-negative")
        need(all(j >= 1 and k >= 0 for j, k in self.online_configs), "basis.online_configs needs J >= 1, sweeps >= 0")
        need(self.tau > 0 and math.isfinite(self.tau), "time.tau must be positive")
        need(self.steps >= 0, "time.steps must be non-negative")
        need(self.source in SOURCES, f"material.source must be one of {SOURCES}")
        need(self.mode in MODES, f"output.mode must be one of {MODES}")
        try:
            self.material()
            self.solve_config()
        except (ParameterError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from None

    # ------------------------------------------------------------ views

    def material(self) -> MaterialParams:
        perm = Permeability(self.permeability, self.K)
        return MaterialParams(self.alpha, self.M, self.tau, self.steps * self.tau, perm, self.clamp_eps)

    def solve_config(self) -> SolveConfig:
        return SolveConfig(delta0=self.delta0, max_picard=self.max_picard, linear_solver=self.linear_solver,
                           krylov_tol=self.krylov_tol, norm=self.norm, clamp_eps=self.clamp_eps)

    def basis_config(self, J: int | None = None, online_sweeps: int | None = None) -> BasisConfig:
        return BasisConfig(self.J if J is None else J,
                           self.online_sweeps if online_sweeps is None else online_sweeps,
                           self.layers, self.relaxed, self.rebuild, self.online_layers)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for section, key, name, _, _ in SCHEMA:
            if not cp.has_section(section):
                cp.add_section(section)
            cp.set(section, key, _fmt(getattr(self, name)))
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()


def defaults_help() -> str:
    """Key reference for ``--help``."""
    d = RunConfig()
    lines = ["configuration keys (section.key = default: meaning):"]
    for section, key, name, _, text in SCHEMA:
        lines.append(f"  {section}.{key} = {_fmt(getattr(d, name))}: {text}")
    return "\n".join(lines)


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    known = {}
    for section, key, name, parse, _ in SCHEMA:
        known.setdefault(section, {})[key] = (name, parse)
    values, seen = {}, set()
    for section in cp.sections():
        if section not in known:
            raise ConfigurationError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in known[section]:
                raise ConfigurationError(f"{source}: unknown key {section}.{key}")
            name, parse = known[section][key]
            try:
                values[name] = parse(raw)
            except ValueError as exc:
                raise ConfigurationError(f"{source}: invalid {section}.{key} = {raw!r} ({exc})") from None
            seen.add(name)
    default = RunConfig()
    applied = tuple(f"{s}.{k}={_fmt(getattr(default, n))}" for s, k, n, _, _ in SCHEMA if n not in seen)
    if applied:
        log.info("%s: defaults applied for %s", source, ", ".join(applied))
    return RunConfig(**values, defaults_applied=applied)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path))

