import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from cemgms.assembly import elem_strain
from cemgms.constitutive import (
    BetaField,
    MaterialParams,
    ParameterError,
    Permeability,
    clamp_strain,
    dK_directional,
    frobenius,
    kappa,
    permeability_K,
    strain_from_stress,
    stress_F,
)
from cemgms.grid import build_fine_mesh

finite = st.floats(-1.0, 1.0, allow_nan=False)
sym_tensor = st.tuples(finite, finite, finite).map(lambda t: np.array([[t[0], t[1]], [t[1], t[2]]]))
betas = st.floats(1e-2, 1e4)


def test_kappa_examples():
    assert kappa(3.0, 0.0) == 1.0
    assert kappa(1.0, 0.5) == pytest.approx(2.0)
    # clamped at (1 - eps) / beta
    assert kappa(1.0, 0.999, eps=0.1) == pytest.approx(10.0)
    assert kappa(0.0, 123.0) == 1.0


def test_kappa_continuous_and_bounded_at_clamp():
    s = np.linspace(0.0, 2.0, 2001)
    k = kappa(1.0, s, eps=0.1)
    assert np.all(np.diff(k) >= 0)
    assert k.max() == pytest.approx(10.0)
    left = kappa(1.0, 0.9 - 1e-12, eps=0.1)
    assert left == pytest.approx(kappa(1.0, 0.9, eps=0.1), rel=1e-9)


@given(betas, st.floats(0, 10), st.floats(0, 10))
def test_kappa_monotone(beta, s1, s2):
    lo, hi = sorted((s1, s2))
    assert kappa(beta, lo) <= kappa(beta, hi)
    assert 1.0 <= kappa(beta, hi) <= 1.0 / 0.1 + 1e-12


def test_clamp_strain_limit():
    assert clamp_strain(2.0, 10.0, eps=0.2) == pytest.approx(0.4)
    assert clamp_strain(2.0, 0.1, eps=0.2) == pytest.approx(0.1)


@given(sym_tensor, betas)
def test_stress_round_trip(xi, beta):
    n = frobenius(xi)
    assume(n > 0)
    xi = xi * (0.5 / beta) / n * min(1.0, n)
    T = stress_F(xi, beta)
    assert np.allclose(strain_from_stress(T, beta), xi, rtol=1e-12, atol=1e-300)
    assert np.allclose(T, T.T)


def _scaled_pair(x1, x2, beta, budget, w):
    n1, n2 = frobenius(x1), frobenius(x2)
    x1 = x1 / n1 * budget * w / beta
    x2 = x2 / n2 * budget * (1 - w) / beta
    return x1, x2


@given(sym_tensor, sym_tensor, betas, st.floats(0.0, 0.9, exclude_max=True), st.floats(0.05, 0.95))
def test_lemma_inequalities(x1, x2, beta, budget, w):
    assume(frobenius(x1) > 1e-3 and frobenius(x2) > 1e-3)
    x1, x2 = _scaled_pair(x1, x2, beta, budget, w)
    d = x1 - x2
    # rounding in F1 - F2 dominates for nearly coincident pairs
    assume(frobenius(d) > 1e-6 * (frobenius(x1) + frobenius(x2)))
    dF = stress_F(x1, beta) - stress_F(x2, beta)
    assert np.sum(dF * d) >= np.sum(d * d)
    assert frobenius(dF) <= frobenius(d) / (1 - beta * (frobenius(x1) + frobenius(x2))) ** 2


@given(sym_tensor, betas, st.floats(0.0, 1e6))
def test_strain_bound(T, beta, scale):
    n = frobenius(T)
    assume(n > 0)
    T = T / n * scale
    assert frobenius(strain_from_stress(T, beta)) < 1.0 / beta


def test_permeability_models():
    assert permeability_K(0.0) == 1.0
    assert permeability_K(1.0) == pytest.approx(math.e)
    assert permeability_K(100.0) == pytest.approx(math.exp(50.0))
    assert permeability_K(np.array([3.0, -2.0]), Permeability("constant", 2.5)).tolist() == [2.5, 2.5]
    with pytest.raises(ParameterError):
        Permeability("linear")
    with pytest.raises(ParameterError):
        Permeability("constant", 0.0)


def test_material_params_validation():
    par = MaterialParams()
    assert (par.alpha, par.M, par.tau, par.steps) == (0.9, 1e6, 0.05, 20)
    with pytest.raises(ParameterError):
        MaterialParams(alpha=1.5)
    with pytest.raises(ParameterError):
        MaterialParams(M=0.0)
    with pytest.raises(ParameterError):
        MaterialParams(tau=0.3, T=1.0)
    with pytest.raises(ParameterError):
        MaterialParams(clamp_eps=0.7)


def test_beta_field_validation():
    b = BetaField([1.0, 1e4, 3.0])
    assert (b.m1, b.m2) == (1.0, 1e4)
    with pytest.raises(ParameterError):
        BetaField([1.0, -1.0])
    with pytest.raises(ParameterError):
        BetaField([1.0, np.nan])


def _fields(mesh):
    x, y = mesh.nodes.T
    u = np.zeros(2 * mesh.n_nodes)
    u[0::2] = 0.2 * np.sin(np.pi * x) * np.sin(np.pi * y)
    u[1::2] = 0.3 * x * y * (1 - x)
    w = np.zeros_like(u)
    w[0::2] = np.cos(2 * x) * y
    w[1::2] = x * x - y
    return u, w


def test_dK_trivial_cases():
    mesh = build_fine_mesh(6, 6)
    u, w = _fields(mesh)
    Du = elem_strain(u, mesh)
    assert np.all(dK_directional(Du, np.zeros_like(Du), 1.0) == 0)
    assert np.all(dK_directional(Du, elem_strain(w, mesh), 0.0) == 0)
    assert np.all(dK_directional(np.zeros_like(Du), elem_strain(w, mesh), 1.0) == 0)


def test_dK_matches_finite_differences():
    mesh = build_fine_mesh(16, 16)
    u, w = _fields(mesh)
    beta = np.full(mesh.n_cells, 1.0)
    Du, Dw = elem_strain(u, mesh), elem_strain(w, mesh)
    exact = dK_directional(Du, Dw, beta)
    base = kappa(beta, frobenius(Du))
    mask = frobenius(Du) > 1e-3
    errs = []
    for eps in (1e-3, 1e-4):
        fd = (kappa(beta, frobenius(elem_strain(u + eps * w, mesh))) - base) / eps
        errs.append(np.abs(fd - exact)[mask])
    assert errs[1].max() < 1e-2
    assert np.max(errs[1]) < np.max(errs[0])
