"""Strain-limiting constitutive law and pressure permeability.

The strain-limiting coefficient ``kappa = 1 / (1 - beta |Du|)`` blows up as
``|Du| -> 1/beta``.  Iterates that leave the admissible set are clamped to
``|Du| <= (1 - eps)/beta`` so that ``kappa`` stays in ``[1, 1/eps]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_CLAMP_EPS = 0.1
DEFAULT_P_MAX = 50.0


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class BetaField:
    """Per-fine-cell strain-limiting parameter."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ParameterError("beta must be a finite, non-negative per-cell array")
        object.__setattr__(self, "values", v)

    @property
    def m1(self) -> float:
        return float(self.values.min())

    @property
    def m2(self) -> float:
        return float(self.values.max())

    @classmethod
    def constant(cls, n_cells: int, value: float) -> "BetaField":
        return cls(np.full(n_cells, float(value)))


@dataclass(frozen=True)
class Permeability:
    """``K(p) = exp(clamp(p))`` or a constant."""

    model: str = "exp_of_p"
    value: float = 1.0
    p_max: float = DEFAULT_P_MAX

    def __post_init__(self):
        if self.model not in ("exp_of_p", "constant"):
            raise ParameterError(f"unknown permeability model {self.model!r}")
        if self.model == "constant" and not self.value > 0:
            raise ParameterError("constant permeability must be positive")

    def __call__(self, p):
        return permeability_K(p, self)


@dataclass(frozen=True)
class MaterialParams:
    alpha: float = 0.9
    M: float = 1.0e6
    tau: float = 0.05
    T: float = 1.0
    permeability: Permeability = Permeability()
    clamp_eps: float = DEFAULT_CLAMP_EPS

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1] (got {self.alpha})")
        if not self.M > 0:
            raise ParameterError(f"Biot modulus M must be positive (got {self.M})")
        if not self.tau > 0:
            raise ParameterError(f"time step tau must be positive (got {self.tau})")
        if not 0.0 < self.clamp_eps <= 0.5:
            raise ParameterError(f"clamp_eps must lie in (0, 0.5] (got {self.clamp_eps})")
        steps = self.T / self.tau
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ParameterError(f"T={self.T} is not an integer multiple of tau={self.tau}")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.tau))


def clamp_strain(beta, strain_norm, eps=DEFAULT_CLAMP_EPS):
    beta = np.asarray(beta, dtype=float)
    s = np.asarray(strain_norm, dtype=float)
    with np.errstate(divide="ignore"):
        limit = np.where(beta > 0, (1.0 - eps) / np.where(beta > 0, beta, 1.0), np.inf)
    return np.minimum(s, limit)


def kappa(beta, strain_norm, eps=DEFAULT_CLAMP_EPS):
    """Strain-limiting coefficient, vectorised over cells."""
    beta = np.asarray(beta, dtype=float)
    s = np.asarray(strain_norm, dtype=float)
    sc = clamp_strain(beta, s, eps)
    n_clamped = int(np.count_nonzero(sc < s))
    if n_clamped:
        log.debug("strain clamp active on %d cell(s)", n_clamped)
    out = 1.0 / (1.0 - beta * sc)
    return out if out.ndim else float(out)


def frobenius(xi):
    xi = np.asarray(xi, dtype=float)
    return np.sqrt(np.sum(xi * xi, axis=(-2, -1)))


def stress_F(xi, beta, eps=DEFAULT_CLAMP_EPS):
    """``F(xi) = xi / (1 - beta |xi|)`` for (batches of) 2x2 tensors."""
    xi = np.asarray(xi, dtype=float)
    k = np.asarray(kappa(beta, frobenius(xi), eps))
    return xi * k[..., None, None]


def strain_from_stress(T, beta):
    """Inverse constitutive map ``E = T / (1 + beta |T|)``; ``|E| < 1/beta`` always."""
    T = np.asarray(T, dtype=float)
    denom = 1.0 + np.asarray(beta, dtype=float) * frobenius(T)
    return T / np.asarray(denom)[..., None, None]


def permeability_K(p, model: Permeability | None = None):
    model = Permeability() if model is None else model
    p = np.asarray(p, dtype=float)
    if model.model == "constant":
        out = np.full(p.shape, model.value)
    else:
        out = np.exp(np.clip(p, -model.p_max, model.p_max))
    return out if out.ndim else float(out)


def dK_directional(Du, Dw, beta, eps=DEFAULT_CLAMP_EPS, eps_div=1e-10):
    """Directional derivative of ``kappa(|Du|)`` along ``Dw``, per cell.

    ``Du`` and ``Dw`` are per-cell symmetric gradients of shape ``(n, 2, 2)``.
    Returns ``beta (Du:Dw) / (|Du| (1 - beta|Du|)^2)`` with ``|Du|`` clamped
    inside the square, and 0 where ``|Du| < eps_div``.
    """
    Du = np.asarray(Du, dtype=float)
    Dw = np.asarray(Dw, dtype=float)
    beta = np.broadcast_to(np.asarray(beta, dtype=float), Du.shape[:-2])
    s = frobenius(Du)
    sc = clamp_strain(beta, s, eps)
    inner = np.sum(Du * Dw, axis=(-2, -1))
    safe = s >= eps_div
    out = np.zeros_like(s)
    out[safe] = beta[safe] * inner[safe] / (s[safe] * (1.0 - beta[safe] * sc[safe]) ** 2)
    return out
