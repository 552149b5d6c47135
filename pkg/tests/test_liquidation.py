from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfcx.liquidation import (
    InitialInventory,
    LiquidationError,
    LiquidationParams,
    LiquidationSolution,
    adjoint_residuals,
    alpha0,
    closed_form_paths,
    derived_constants,
    execution_cost,
    simulate_market,
)
from oracles import liquidation_alpha0, liquidation_rk4

# frozen from a 30-digit Taylor-series ODE integration (mpmath.odefun) of F'' = (phi/k) F
GENERIC = dict(lam=0.05, k=0.1, phi=0.01, A=1.0, T=1.0)
ALPHA0_GENERIC = -9.434060061410344
Q_HALF_GENERIC = 5.388551728784136
ALPHA_HALF_GENERIC = -9.050145756598398


def test_constants_simple():
    c = derived_constants(LiquidationParams(lam=0.0, k=1, phi=1, A=1))
    assert (c.r, c.d1, c.d2, c.c1, c.c2) == (1.0, 0.0, 2.0, 0.0, 4.0)
    c = derived_constants(LiquidationParams(lam=0.5, k=1, phi=1, A=1))
    assert (c.c1, c.c2) == (0.5, 3.5)


def test_constants_generic():
    c = derived_constants(LiquidationParams(**GENERIC))
    assert np.isclose(c.r, 0.316227766016837933, rtol=1e-14)
    assert np.isclose(c.d1, -0.968377223398316207, rtol=1e-14)
    assert np.isclose(c.d2, 1.031622776601683793, rtol=1e-14)
    assert np.isclose(c.c1, -1.886754446796632413, rtol=1e-14)
    assert np.isclose(c.c2, 2.013245553203367587, rtol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.05, 5), st.floats(0, 5), st.floats(0.05, 5), st.floats(0, 3))
def test_constant_identities(k, phi, A, lam):
    c = derived_constants(LiquidationParams(lam=lam, k=k, phi=phi, A=A))
    assert c.d2 > 0
    assert np.isclose(c.d1 + c.d2, 2 * np.sqrt(phi * k), atol=1e-12)
    assert np.isclose(c.c1 + c.c2, 2 * (c.d1 + c.d2), atol=1e-12)


def test_param_validation():
    with pytest.raises(ValueError):
        LiquidationParams(lam=0, k=0, phi=1, A=1)
    with pytest.raises(ValueError):
        LiquidationParams(lam=0, k=1, phi=-1, A=1)
    with pytest.raises(ValueError):
        LiquidationParams(lam=0, k=1, phi=1, A=0)


def test_alpha0_examples():
    p = LiquidationParams(lam=0.0, k=1, phi=1, A=1)
    assert np.isclose(alpha0(p, 5.0, 5.0), -5.0, rtol=1e-14)
    assert alpha0(p, 0.0, 0.0) == 0.0
    assert np.isclose(alpha0(LiquidationParams(**GENERIC), 10.0, 10.0), ALPHA0_GENERIC, rtol=1e-12)


def test_alpha0_matches_direct_formula():
    rng = np.random.default_rng(0)
    for _ in range(20):
        k, phi, A = rng.uniform(0.1, 2, size=3)
        lam = rng.uniform(0, 2 * A)
        T = rng.uniform(0.5, 2)
        q0, Eq0 = rng.normal(size=2) * 5
        got = alpha0(LiquidationParams(lam=lam, k=k, phi=phi, A=A, T=T), q0, Eq0)
        assert np.isclose(got, liquidation_alpha0(k, phi, A, lam, T, q0, Eq0), rtol=1e-10, atol=1e-12)


def test_vanishing_denominator_reported():
    # c1 e^{-rT} + c2 e^{rT} = 0 for a suitable lambda > 2 d2
    k = phi = 1.0
    A, T = 0.5, 1.0
    d1, d2 = 1 - A, 1 + A
    # solve (2 d1 + lam) e^{-1} + (2 d2 - lam) e = 0 for lam
    e = np.exp(1.0)
    lam = (2 * d1 / e + 2 * d2 * e) / (e - 1 / e)
    with pytest.raises(LiquidationError, match="c1"):
        LiquidationSolution(LiquidationParams(lam=lam, k=k, phi=phi, A=A, T=T))


def test_paths_examples():
    p = LiquidationParams(lam=0.0, k=1, phi=1, A=1)
    Q, a = closed_form_paths(p, 3.0, 3.0, 0.0)
    assert Q == 3.0 and np.isclose(a, alpha0(p, 3.0, 3.0))
    t = np.linspace(0, 1, 11)
    Q, a = closed_form_paths(p, 3.0, 1.0, t)
    assert np.allclose(Q, 3 * np.exp(-t), rtol=1e-14)
    assert np.allclose(a, -3 * np.exp(-t), rtol=1e-14)
    Q, a = closed_form_paths(LiquidationParams(**GENERIC), 10.0, 10.0, 0.5)
    assert np.isclose(Q, Q_HALF_GENERIC, rtol=1e-12)
    assert np.isclose(a, ALPHA_HALF_GENERIC, rtol=1e-12)
    with pytest.raises(ValueError):
        closed_form_paths(p, 1.0, 1.0, 1.5)


def test_paths_match_rk4():
    rng = np.random.default_rng(1)
    for _ in range(5):
        k, phi, A = rng.uniform(0.2, 2, size=3)
        lam = rng.uniform(0, 2 * A)
        T = rng.uniform(0.5, 2)
        q0, Eq0 = 4.0, 2.5
        Q, a = closed_form_paths(LiquidationParams(lam=lam, k=k, phi=phi, A=A, T=T), q0, Eq0, T / 2)
        ref = liquidation_rk4(k, phi, A, lam, T, q0, Eq0, T / 2)
        assert np.allclose([Q, a], ref, rtol=1e-9)


def test_phi_zero_is_limit_of_small_phi():
    base = dict(lam=0.7, k=0.3, A=1.2, T=1.5)
    s0 = LiquidationSolution(LiquidationParams(phi=0.0, **base))
    s1 = LiquidationSolution(LiquidationParams(phi=1e-10, **base))
    t = np.linspace(0, 1.5, 7)
    for q0, Eq0 in [(3.0, 2.0), (1.0, -1.0)]:
        assert np.allclose(s0.paths(t, q0, Eq0), s1.paths(t, q0, Eq0), rtol=1e-6)
        assert abs(s0.terminal_coupling_residual(q0, Eq0)) < 1e-12


def test_lambda_zero_has_no_mean_field_term():
    s = LiquidationSolution(LiquidationParams(lam=0.0, k=0.4, phi=0.9, A=1.1))
    t = np.linspace(0, 1, 9)
    assert np.array_equal(s.paths(t, 2.0, 0.0)[0], s.paths(t, 2.0, 17.0)[0])
    assert np.array_equal(s.paths(t, 2.0, 0.0)[1], s.paths(t, 2.0, 17.0)[1])


def test_large_rT_does_not_overflow():
    s = LiquidationSolution(LiquidationParams(lam=0.3, k=1e-3, phi=100.0, A=1.0, T=3.0))
    Q, a = s.paths(np.linspace(0, 3, 5), 1.0, 1.0)
    assert np.all(np.isfinite(Q)) and np.all(np.isfinite(a))


def test_integrated_inventory_matches_quadrature():
    from scipy.integrate import quad

    s = LiquidationSolution(LiquidationParams(lam=0.6, k=0.5, phi=0.7, A=0.9, T=1.3))
    for t in (0.2, 0.9, 1.3):
        ref = quad(lambda u: s.inventory(u, 2.0, 1.5), 0, t, epsabs=1e-13)[0]
        assert np.isclose(s.integrated_inventory(t, 2.0, 1.5), ref, rtol=1e-11)


def test_simulate_deterministic_linear_liquidation():
    p = LiquidationParams(lam=0.0, k=1, phi=0, A=1, sigma=0.0, s0=100.0, q0=InitialInventory.constant(4.0))
    ens = simulate_market(p, lambda t, q0, Eq0: -q0 / 1.0, N=3, dt=0.01)
    assert np.allclose(ens["Q"][:, -1], 0.0, atol=1e-12)
    assert np.all(ens["S"] == 100.0)


def test_simulate_single_path_matches_closed_form():
    p = LiquidationParams(lam=0.4, k=0.5, phi=0.8, A=1.0, sigma=0.0, s0=10.0, q0=InitialInventory.constant(3.0))
    sol = LiquidationSolution(p)
    ens = simulate_market(p, sol, N=1, dt=1e-3)
    Q, a = sol.paths(ens.grid.points, 3.0, 3.0)
    assert np.allclose(ens["Q"][0], Q, atol=1e-12)
    assert np.allclose(ens["alpha"][0], a, atol=1e-12)


def test_simulate_constant_speed_price_moments():
    p = LiquidationParams(lam=0.5, k=1, phi=0, A=1, sigma=0.3, s0=2.0, T=1.0)
    ens = simulate_market(p, lambda t, q0, Eq0: np.full_like(q0, -1.5), N=50_000, dt=0.02, seed=5)
    ST = ens["S"][:, -1]
    mean, var = 2.0 + 0.5 * (-1.5) * 1.0, 0.3**2 * 1.0
    assert abs(ST.mean() - mean) < 4 * np.sqrt(var / ST.size)
    assert abs(ST.var() - var) < 4 * var * np.sqrt(2 / ST.size)


def test_simulation_is_reproducible_and_records_subgrid():
    p = LiquidationParams(lam=0.3, k=1, phi=0.5, A=1, sigma=0.4, q0=InitialInventory.gaussian(2.0, 0.5))
    sol = LiquidationSolution(p)
    e1 = simulate_market(p, sol, N=100, dt=0.01, seed=9)
    e2 = simulate_market(p, sol, N=100, dt=0.01, seed=9, record_every=10)
    assert np.array_equal(e1["S"][:, ::10], e2["S"])
    assert e2.grid.n_steps == 10


def test_cost_trivial_cases():
    p = LiquidationParams(lam=0.0, k=1, phi=0, A=1, sigma=0.0, s0=0.0, q0=InitialInventory.constant(0.0))
    ens = simulate_market(p, lambda t, q0, Eq0: 0.0 * q0, N=4, dt=0.1)
    assert execution_cost(ens, p).mean == 0.0


def test_cost_constant_speed_closed_form():
    k, A, s0, q, a, T = 0.7, 1.3, 5.0, 2.0, -1.2, 1.0
    p = LiquidationParams(lam=0.0, k=k, phi=0.0, A=A, sigma=0.0, s0=s0, T=T, q0=InitialInventory.constant(q))
    ens = simulate_market(p, lambda t, q0, Eq0: np.full_like(q0, a), N=2, dt=0.05)
    QT = q + a * T
    expected = a * s0 * T + k * a**2 * T - QT * (s0 - A * QT)
    assert np.isclose(execution_cost(ens, p).mean, expected, rtol=1e-12)


def test_adjoint_residuals_exact_case():
    p = LiquidationParams(lam=0.0, k=1, phi=1, A=1, sigma=0.0, s0=3.0, q0=InitialInventory.constant(2.0))
    ens = simulate_market(p, LiquidationSolution(p), N=2, dt=1e-3)
    rep = adjoint_residuals(ens, p)
    assert rep["foc"]["max"] < 1e-8
    assert rep["y1_terminal"]["max"] < 1e-8
    assert rep["y2_terminal"]["max"] < 1e-8


def test_adjoint_residuals_monte_carlo():
    p = LiquidationParams(lam=0.8, k=0.5, phi=0.6, A=1.5, sigma=0.5, s0=10.0, q0=InitialInventory.gaussian(3.0, 1.0))
    ens = simulate_market(p, LiquidationSolution(p), N=100_000, dt=0.01, seed=1, record_every=5)
    rep = adjoint_residuals(ens, p)
    assert rep["foc"]["normalized_max"] < 5e-3
    assert rep["y2_terminal"]["normalized_max"] < 5e-3


def test_adjoint_residuals_flag_wrong_speed():
    p = LiquidationParams(lam=0.2, k=0.5, phi=0.6, A=1.5, sigma=0.0, s0=10.0, q0=InitialInventory.constant(3.0))
    ens = simulate_market(p, lambda t, q0, Eq0: 0.0 * q0, N=2, dt=0.01)
    rep = adjoint_residuals(ens, p)
    assert rep["foc"]["normalized_mean"] > 1e-2
