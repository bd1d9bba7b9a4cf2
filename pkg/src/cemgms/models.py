"""Material rasters: ASCII grid files and synthetic two-level beta fields.

Grid files hold a header line ``width height`` followed by ``height`` rows of
``width`` floats (row ``j`` is the ``j``-th row from ``y = 0``).  Values are
written with ``repr`` so that a write/read round trip is exact.

Synthetic generators return values in ``{BETA_LOW, BETA_HIGH}``.  Stiff
inclusions are kept a fixed margin away from the boundary: under the model
source the linear strain is largest along the walls, where a ``1e4`` phase
would push ``beta |Du|`` towards the strain limit.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import FineMesh

log = logging.getLogger(__name__)

BETA_LOW = 1.0
BETA_HIGH = 1.0e4
MARGIN = 0.15


class RasterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ModelRaster:
    """Per-cell values on a ``width x height`` raster; ``values[j, i]``."""

    values: np.ndarray
    provenance: str

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def resample(self, width: int, height: int) -> "ModelRaster":
        """Nearest-cell resampling to another raster size."""
        if (width, height) == (self.width, self.height):
            return self
        log.info("resampling %s from %dx%d to %dx%d (nearest cell)",
                 self.provenance, self.width, self.height, width, height)
        ii = np.minimum(((np.arange(width) + 0.5) * self.width / width).astype(int), self.width - 1)
        jj = np.minimum(((np.arange(height) + 0.5) * self.height / height).astype(int), self.height - 1)
        return ModelRaster(self.values[np.ix_(jj, ii)], self.provenance)

    def cell_values(self, mesh: FineMesh) -> np.ndarray:
        """Per-triangle values: both triangles of a grid square share its pixel."""
        r = self.resample(mesh.nx, mesh.ny)
        ij = mesh.cell_square
        return r.values[ij[:, 1], ij[:, 0]].astype(float)


# ---------------------------------------------------------------- file IO

def write_grid(path, values) -> None:
    values = np.atleast_2d(np.asarray(values, dtype=float))
    h, w = values.shape
    lines = [f"{w} {h}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in values]
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    rows = [(k + 1, ln) for k, ln in enumerate(text) if ln.strip()]
    if not rows:
        raise RasterError(f"{path}: empty raster file")
    lineno, header = rows[0]
    parts = header.split()
    try:
        if len(parts) != 2:
            raise ValueError
        w, h = int(parts[0]), int(parts[1])
        if w < 1 or h < 1:
            raise ValueError
    except ValueError:
        raise RasterError(f"{path}:{lineno}: header must be 'width height', got {header!r}") from None
    if len(rows) - 1 != h:
        raise RasterError(f"{path}:{rows[-1][0]}: expected {h} data rows, found {len(rows) - 1}")
    out = np.empty((h, w))
    for j, (lineno, ln) in enumerate(rows[1:]):
        try:
            vals = [float(t) for t in ln.split()]
        except ValueError as exc:
            raise RasterError(f"{path}:{lineno}: {exc}") from None
        if len(vals) != w:
            raise RasterError(f"{path}:{lineno}: expected {w} values, found {len(vals)}")
        out[j] = vals
    return out


def nodal_raster(mesh: FineMesh, values) -> np.ndarray:
    """Nodal field as a ``(ny+1, nx+1)`` array for dumping."""
    return np.asarray(values, dtype=float).reshape(mesh.ny + 1, mesh.nx + 1)


# ---------------------------------------------------------------- generators

def _centres(width, height):
    x = (np.arange(width) + 0.5) / width
    y = (np.arange(height) + 0.5) / height
    return np.meshgrid(x, y)


def constant(width, height, value=BETA_LOW) -> np.ndarray:
    return np.full((height, width), float(value))


def stripes(width, height, count=4, thickness=0.04) -> np.ndarray:
    """Horizontal stiff channels spanning the interior."""
    X, Y = _centres(width, height)
    high = np.zeros(X.shape, dtype=bool)
    for yc in np.linspace(MARGIN + thickness, 1 - MARGIN - thickness, int(count)):
        high |= np.abs(Y - yc) < thickness / 2
    high &= (X > MARGIN) & (X < 1 - MARGIN)
    return np.where(high, BETA_HIGH, BETA_LOW)


def blobs(width, height, seed=0, count=30, r_min=0.03, r_max=0.07) -> np.ndarray:
    """Random discs of the stiff phase, fully inside the interior box."""
    rng = np.random.default_rng(int(seed))
    X, Y = _centres(width, height)
    r = rng.uniform(r_min, r_max, int(count))
    span = 1.0 - 2.0 * MARGIN - 2.0 * r[:, None]
    ctr = MARGIN + r[:, None] + rng.random((int(count), 2)) * span
    high = np.zeros(X.shape, dtype=bool)
    for (cx, cy), rk in zip(ctr, r):
        high |= (X - cx) ** 2 + (Y - cy) ** 2 < rk * rk
    return np.where(high, BETA_HIGH, BETA_LOW)


GENERATORS = {"constant": constant, "stripes": stripes, "blobs": blobs}
_SPEC = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*([^)]*)\s*\))?\s*$")


def parse_model_spec(spec: str):
    """``"blobs(7)"`` -> ``("blobs", [7.0])``; ``None`` if not a generator name."""
    m = _SPEC.match(spec)
    if not m or m.group(1) not in GENERATORS:
        return None
    args = []
    if m.group(2):
        for tok in m.group(2).split(","):
            tok = tok.strip()
            if "=" in tok:
                tok = tok.split("=", 1)[1].strip()
            try:
                args.append(float(tok))
            except ValueError:
                raise RasterError(f"bad argument {tok!r} in model spec {spec!r}") from None
    return m.group(1), args


def load_or_generate_beta(spec: str, width: int, height: int) -> ModelRaster:
    """Raster from a generator spec (``constant(v)``, ``stripes``, ``blobs(seed)``)
    or from a grid file path."""
    parsed = parse_model_spec(spec)
    if parsed is not None:
        name, args = parsed
        try:
            values = GENERATORS[name](width, height, *args)
        except TypeError:
            raise RasterError(f"wrong number of arguments in model spec {spec!r}") from None
        return ModelRaster(values, spec.strip())
    path = Path(spec)
    if not path.exists():
        raise RasterError(f"model {spec!r} is neither a generator ({', '.join(GENERATORS)}) nor a file")
    return ModelRaster(read_grid(path), str(path))
