import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfcx.core import EmpiricalLaw
from mfcx.lift import lift_to_sde
from mfcx.transport import (
    ActionLattice, CostSpec, JointTable, LinearCost, brute_force_Pn, check_causality, cost_cn, dp_linear_oracle,
    integral_costs, jensen_margins, ladder, moment_penalty_costs, probe_costs, project, quadratic_costs,
    quadratic_reference_value, quantize_wiener, solve_Pn, zero_control_coupling,
)
from oracles import (
    continuous_quadratic_value, enumerate_linear_policies, lattice_pointwise_value, quadratic_ladder_value,
)

FINE = ActionLattice.uniform(2.5, 21)
QUAD = quadratic_costs()


# -- quantization ----------------------------------------------------------------


def test_binomial_examples():
    w = quantize_wiener(0, 2, 1.0)
    assert w.nodes.tolist() == [-1.0, 1.0] and w.probs.tolist() == [0.5, 0.5]
    w = quantize_wiener(1, 2, 1.0)
    assert w.steps == 2
    np.testing.assert_allclose(w.nodes, [-math.sqrt(0.5), math.sqrt(0.5)], rtol=1e-15)


def test_gauss_hermite_moments():
    w = quantize_wiener(0, 5, 1.0)
    assert w.kind == "gauss-hermite"
    for k, target in zip(range(1, 5), (0.0, 1.0, 0.0, 3.0)):
        assert w.moment(k) == pytest.approx(target, abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 6), st.sampled_from([("gauss-hermite", 2), ("gauss-hermite", 3), ("gauss-hermite", 4),
                                           ("gauss-hermite", 7), ("binomial", 2), ("lattice", 3), ("lattice", 5)]),
       st.floats(0.1, 5.0))
def test_quantization_invariants(n, km, T):
    kind, m = km
    w = quantize_wiener(n, m, T, kind)
    assert abs(w.moment(1)) < 1e-12
    assert w.moment(2) == pytest.approx(T / 2**n, abs=1e-9)
    assert w.probs.sum() == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(w.keys @ w.basis, w.nodes, atol=1e-14)


def test_quantization_errors():
    with pytest.raises(ValueError):
        quantize_wiener(0, 1)
    with pytest.raises(ValueError):
        quantize_wiener(0, 4, kind="lattice")
    with pytest.raises(ValueError):
        quantize_wiener(0, 3, kind="binomial")


def test_paths_enumeration():
    w = quantize_wiener(1, 3, 1.0)
    inc, p = w.paths()
    assert inc.shape == (9, 2) and p.sum() == pytest.approx(1.0)
    assert p @ inc.sum(axis=1) ** 2 == pytest.approx(1.0)


# -- action lattice ------------------------------------------------------------


def test_action_lattice():
    a = ActionLattice([-1, -0.5, 0])
    assert a.h == 0.5 and a.k.tolist() == [-2, -1, 0]
    assert a.values[a.tie_order].tolist() == [0.0, -0.5, -1.0]
    b = ActionLattice([1, -1, 0, 0.5])
    assert b.values[b.tie_order].tolist() == [0.0, 0.5, -1.0, 1.0]
    with pytest.raises(ValueError, match="contain 0"):
        ActionLattice([1.0, 2.0])
    with pytest.raises(ValueError, match="empty"):
        ActionLattice([])
    with pytest.raises(ValueError, match="rational"):
        ActionLattice([0.0, 1.0, math.sqrt(2)])
    c = ActionLattice([0.0, math.pi, -2 * math.pi])
    assert c.h == pytest.approx(math.pi, rel=1e-15) and c.k.tolist() == [-2, 0, 1]
    assert ActionLattice([0.0]).size == 1


# -- cost evaluation -------------------------------------------------------------


def test_zero_control_cost():
    for n, m in [(0, 2), (2, 2), (1, 5)]:
        w = quantize_wiener(n, m, 2.0)
        c = zero_control_coupling(w, FINE, x0=0.0)
        assert cost_cn(c, QUAD, n) == pytest.approx(2.0, abs=1e-12)


def test_constant_rate_cost():
    z0 = 0.75
    w = quantize_wiener(2, 2, 1.0)
    forced = dp_linear_oracle(LinearCost(rate=lambda i, z: (z - z0) ** 2), w, FINE, x0=0.0)
    f_only = integral_costs(lambda z: z**2, lambda u: 0 * u)
    assert cost_cn(forced.coupling, f_only, 2) == pytest.approx(z0**2, abs=1e-12)
    for law in forced.coupling.rate_laws():
        assert law.atoms[:, 0].tolist() == [z0]


def test_level_zero_optimum_cost():
    w = quantize_wiener(0, 2, 1.0)
    res = solve_Pn(QUAD, 0, w, FINE, x0=1.0)
    assert cost_cn(res.coupling, QUAD, 0) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError, match="level"):
        cost_cn(res.coupling, QUAD, 1)


# -- linear oracle --------------------------------------------------------------


def test_dp_y_independent_cost_picks_zero():
    w = quantize_wiener(1, 2, 1.0)
    res = dp_linear_oracle(LinearCost(node=lambda i, x, y: x**2 + 0 * y), w, FINE, x0=0.3)
    # E[x_1^2 + x_2^2] = 0.5 + 1.0
    assert res.value == pytest.approx(1.5, abs=1e-12)
    for law in res.coupling.rate_laws():
        assert law.atoms[:, 0].tolist() == [0.0]


def test_dp_nearest_lattice_point():
    w = quantize_wiener(0, 5, 1.0)
    acts = ActionLattice([-1, -0.5, 0, 0.5, 1])
    target = 0.2
    res = dp_linear_oracle(LinearCost(terminal=lambda y: (y - target) ** 2), w, acts, x0=0.0)
    K = res.coupling.kernel(0)[:, 0, :]
    for j, node in enumerate(w.nodes):
        chosen = acts.values[np.argmax(K[j])]
        assert chosen == acts.values[np.argmin(np.abs(node + acts.values - target))]


@pytest.mark.parametrize("seed", range(4))
def test_dp_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    c1, c2, c3 = rng.normal(size=3)
    w = quantize_wiener(1, 2, 1.0)
    acts = ActionLattice([-1, 0, 1])

    def node(i, x, y):
        return c1 * np.sin(3 * x + i) * y + c2 * np.cos(y) * (i + 1)

    def terminal(y):
        return c3 * y**2 + np.sin(5 * y)

    res = dp_linear_oracle(LinearCost(node=node, terminal=terminal), w, acts, x0=0.4)
    expected = enumerate_linear_policies(w.nodes, w.probs, acts.values, 2, w.dt, 0.4,
                                         lambda i, x, y, z: float(node(i, x, y)), lambda y: float(terminal(y)))
    assert res.value == pytest.approx(expected, abs=1e-12)
    bf = brute_force_Pn(LinearCost(node=node, terminal=terminal), 1, w, acts, x0=0.4)
    assert bf.value == pytest.approx(expected, abs=1e-12)


def test_dp_rejects_non_elementwise_cost():
    w = quantize_wiener(0, 2, 1.0)
    with pytest.raises(ValueError, match="elementwise"):
        dp_linear_oracle(LinearCost(terminal=lambda y: np.ones(3)), w, FINE)


# -- Frank-Wolfe ---------------------------------------------------------------


def test_absorb_noise_instance():
    w = quantize_wiener(0, 2, 1.0)
    costs = integral_costs(lambda z: 0 * z, lambda u: (u - 1.0) ** 2)
    res = solve_Pn(costs, 0, w, ActionLattice([-2, -1, 0, 1, 2]), x0=1.0)
    assert res.value == pytest.approx(0.0, abs=1e-15)
    assert res.converged


def test_quadratic_level_zero():
    w = quantize_wiener(0, 2, 1.0)
    res = solve_Pn(QUAD, 0, w, FINE, x0=1.0, tol=1e-9)
    assert res.value == pytest.approx(1.0, abs=2e-9)


@pytest.mark.parametrize("n", [0, 1])
def test_binomial_lattice_value_brackets(n):
    # restricted rates can only raise the value above the unconstrained discrete oracle
    w = quantize_wiener(n, 2, 1.0)
    res = solve_Pn(QUAD, n, w, FINE, x0=1.0)
    assert res.value >= quadratic_ladder_value(n) - 1e-12
    assert res.value <= continuous_quadratic_value()


def test_level_zero_lattice_oracle():
    w = quantize_wiener(0, 5, 1.0)
    acts = ActionLattice([-1.5, -1, -0.5, 0, 0.5])
    res = solve_Pn(QUAD, 0, w, acts, x0=1.0)
    assert res.value == pytest.approx(lattice_pointwise_value(1.0, w.nodes, w.probs, acts.values), abs=1e-12)


def test_frank_wolfe_monotone_and_gap():
    w = quantize_wiener(1, 2, 1.0)
    costs = moment_penalty_costs(2.0, 1.0)
    res = solve_Pn(costs, 1, w, ActionLattice([-1, -0.5, 0, 0.5, 1]), x0=1.0, tol=1e-5, max_iters=5000)
    assert res.converged and res.gap <= 1e-5
    assert np.all(np.diff(res.values) <= 0)
    assert res.value == pytest.approx(cost_cn(res.coupling, costs, 1), abs=1e-14)


def test_frank_wolfe_line_search_option():
    w = quantize_wiener(0, 2, 1.0)
    costs = moment_penalty_costs(1.0, 1.0)
    a = solve_Pn(costs, 0, w, ActionLattice.uniform(2, 9), x0=1.0, tol=1e-8, max_iters=5000)
    b = solve_Pn(costs, 0, w, ActionLattice.uniform(2, 9), x0=1.0, tol=1e-8, line_search=True)
    assert b.iterations < a.iterations
    assert a.value == pytest.approx(b.value, abs=1e-6)


def test_solver_reports_non_convergence():
    w = quantize_wiener(1, 2, 1.0)
    res = solve_Pn(moment_penalty_costs(2.0, 1.0), 1, w, ActionLattice([-1, -0.5, 0, 0.5, 1]), x0=1.0,
                   tol=1e-12, max_iters=3)
    assert not res.converged and res.iterations == 3 and res.gap > 1e-12


def test_solver_rejects_concave_cost():
    def variance(law):
        m = law.weights @ law.atoms[:, 0]
        return float(law.weights @ (law.atoms[:, 0] - m) ** 2)

    costs = CostSpec(lambda law: -variance(law), lambda law: 0.0)
    assert not probe_costs(costs)["passed"]
    with pytest.raises(ValueError, match="probes"):
        solve_Pn(costs, 0, quantize_wiener(0, 2), FINE)


def test_solver_level_mismatch():
    with pytest.raises(ValueError, match="level"):
        solve_Pn(QUAD, 1, quantize_wiener(0, 2), FINE)


def test_numerical_first_variation_fallback():
    base = moment_penalty_costs(1.0, 1.0)
    numeric = CostSpec(base.f, base.g, name="numeric")
    w = quantize_wiener(0, 2, 1.0)
    acts = ActionLattice.uniform(2, 9)
    with pytest.warns(RuntimeWarning, match="finite differences"):
        import mfcx.transport as tr
        tr._warned_numerical = False
        a = solve_Pn(numeric, 0, w, acts, x0=1.0, tol=1e-6, max_iters=5000)
    b = solve_Pn(base, 0, w, acts, x0=1.0, tol=1e-6, max_iters=5000)
    assert a.value == pytest.approx(b.value, abs=1e-5)


def test_probe_built_in_costs():
    for costs in (QUAD, moment_penalty_costs(1.0, 3.0), integral_costs(np.abs, lambda u: np.maximum(u, 0.0))):
        assert probe_costs(costs)["passed"]


# -- brute force ---------------------------------------------------------------


def test_brute_force_small_lattice():
    w = quantize_wiener(0, 2, 1.0)
    acts = ActionLattice([-1, -0.5, 0])
    res = brute_force_Pn(QUAD, 0, w, acts, x0=1.0)
    assert res.n_policies == 9
    assert res.value == pytest.approx(lattice_pointwise_value(1.0, w.nodes, w.probs, acts.values), abs=1e-15)


def test_brute_force_zero_cost():
    zero = integral_costs(lambda z: 0 * z, lambda u: 0 * u)
    res = brute_force_Pn(zero, 1, quantize_wiener(1, 2), ActionLattice([-1, 0, 1]))
    assert res.value == 0.0


def test_brute_force_cap():
    with pytest.raises(ValueError, match="cap"):
        brute_force_Pn(QUAD, 1, quantize_wiener(1, 3), FINE)


def test_aggregated_policy_keeps_cost():
    # the path-dependent optimum, folded onto recombining states, has the same cost
    w = quantize_wiener(1, 2, 1.0)
    acts = ActionLattice([-1, -0.5, 0, 0.5, 1])
    costs = moment_penalty_costs(0.5, 0.5)
    res = brute_force_Pn(costs, 1, w, acts, x0=0.7, probe_mixtures=False)
    assert cost_cn(res.coupling, costs, 1) == pytest.approx(res.value, abs=1e-13)


def test_mixtures_beat_deterministic_policies():
    w = quantize_wiener(1, 2, 1.0)
    acts = ActionLattice([-1, -0.5, 0, 0.5, 1])
    costs = moment_penalty_costs(2.0, 2.0)
    bf = brute_force_Pn(costs, 1, w, acts, x0=1.0)
    fw = solve_Pn(costs, 1, w, acts, x0=1.0, tol=1e-7, max_iters=20000)
    assert bf.mixtures_improve
    assert fw.value < bf.value - 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_solver_never_worse_than_brute_force(seed):
    rng = np.random.default_rng(100 + seed)
    kf, kg = rng.uniform(0, 2, 2)
    w = quantize_wiener(int(rng.integers(0, 2)), 2, 1.0)
    acts = ActionLattice([-1, -0.5, 0, 0.5])
    costs = moment_penalty_costs(kf, kg, center=rng.uniform(-1, 1))
    fw = solve_Pn(costs, w.n, w, acts, x0=1.0, tol=1e-6, max_iters=20000)
    bf = brute_force_Pn(costs, w.n, w, acts, x0=1.0)
    assert fw.value <= bf.value + 2e-6


# -- ladder, projection, Jensen ------------------------------------------------


def test_quadratic_ladder_lattice():
    res = ladder(QUAD, 3, {"kind": "lattice", "m": 5}, FINE, x0=1.0, reference=quadratic_reference_value())
    assert res.values[0] == pytest.approx(1.0, abs=2e-6)
    assert res.monotone and min(res.margins) > 0
    assert res.below_reference
    for n, v in enumerate(res.values):
        assert v >= quadratic_ladder_value(n) - 1e-12


def test_gauss_hermite_ladder():
    res = ladder(QUAD, 2, {"m": 5}, FINE, x0=1.0, reference=quadratic_reference_value())
    assert res.monotone and res.below_reference
    # rounding the rates on a 0.25 grid costs a little at level 0
    assert 1.0 < res.values[0] < 1.0 + res.budget


def test_flat_ladder():
    def mean_gap(law):
        return float(law.weights @ law.atoms[:, 0]) - 0.5

    flat = CostSpec(lambda law: 0.0, lambda law: mean_gap(law) ** 2,
                    lambda law, z: 0 * np.asarray(z), lambda law, u: 2 * mean_gap(law) * np.asarray(u))
    assert probe_costs(flat)["passed"]
    res = ladder(flat, 3, {"kind": "lattice", "m": 3}, ActionLattice([-1, 0, 1]), x0=0.5)
    np.testing.assert_allclose(res.values, 0.0, atol=1e-15)
    np.testing.assert_allclose(res.margins, 0.0, atol=1e-15)


def test_ladder_rows_and_errors():
    res = ladder(QUAD, 1, {"m": 2}, ActionLattice.uniform(1, 9), x0=1.0, reference=1.2)
    rows = res.rows()
    assert [r["n"] for r in rows] == [0, 1]
    assert math.isnan(rows[0]["margin"]) and rows[1]["margin"] == pytest.approx(res.values[1] - res.values[0])
    assert rows[0]["gap_to_reference"] == pytest.approx(1.2 - res.values[0])
    with pytest.raises(ValueError):
        ladder(QUAD, 7)
    with pytest.raises(ValueError, match="unknown"):
        ladder(QUAD, 1, {"m": 2, "foo": 1})


def test_reference_value():
    assert quadratic_reference_value() == pytest.approx(continuous_quadratic_value(), abs=1e-15)
    assert quadratic_reference_value() == pytest.approx(1.1931471805599454, abs=1e-15)


def test_projection_of_zero_control():
    w = quantize_wiener(2, 2, 1.0)
    c = zero_control_coupling(w, FINE, x0=1.0)
    for k in range(3):
        p = project(c, k)
        assert all(law.atoms[:, 0].tolist() == [0.0] for law in p.rate_laws())
        assert cost_cn(p, QUAD, k) == cost_cn(c, QUAD, 2)
    with pytest.raises(ValueError):
        project(c, 3)


def test_projection_averages_rates():
    w = quantize_wiener(1, 2, 1.0)
    res = solve_Pn(QUAD, 1, w, FINE, x0=1.0)
    table = res.coupling.to_joint_table()
    rates = (np.diff(table.y, axis=1) - np.diff(table.x, axis=1)) / w.dt
    coarse = project(res.coupling, 0).rate_laws()[0]
    direct = EmpiricalLaw(rates.mean(axis=1), table.p).compress()
    np.testing.assert_allclose(coarse.compress().atoms, direct.atoms, atol=1e-12)
    np.testing.assert_allclose(coarse.compress().weights, direct.weights, atol=1e-12)


@pytest.mark.parametrize("costs", [QUAD, moment_penalty_costs(1.0, 1.0)], ids=["quadratic", "moment"])
def test_jensen_chain(costs):
    for n in (1, 2, 3):
        w = quantize_wiener(n, 3, 1.0, "lattice")
        res = solve_Pn(costs, n, w, ActionLattice.uniform(2, 9), x0=1.0, tol=1e-4, max_iters=300)
        margins = jensen_margins(res.coupling, costs)
        assert all(mg >= 0 for mg in margins)
        assert margins[-1] == 0


# -- causality -----------------------------------------------------------------


def test_solver_couplings_are_causal():
    w = quantize_wiener(2, 2, 1.0)
    res = solve_Pn(QUAD, 2, w, FINE, x0=1.0)
    assert check_causality(res.coupling)
    assert check_causality(res.coupling.to_joint_table())


def test_anticipating_table_rejected():
    w = quantize_wiener(1, 2, 1.0)
    inc, p = w.paths()
    x = np.concatenate([np.zeros((4, 1)), np.cumsum(inc, axis=1)], axis=1)
    y = x.copy()
    y[:, 1] = x[:, 2]
    report = check_causality(JointTable(x, y, p))
    assert not report and report.worst_step == 1
    assert check_causality({"x": x, "y": x + 1.0, "p": p})


def test_product_coupling_is_causal():
    w = quantize_wiener(1, 3, 1.0)
    inc, px = w.paths()
    x = np.concatenate([np.zeros((px.size, 1)), np.cumsum(inc, axis=1)], axis=1)
    ys = np.array([[1.0, 2.0, 0.0], [1.0, -1.0, 3.0], [1.0, 0.5, 0.5]])
    py = np.array([0.2, 0.3, 0.5])
    rows = list(itertools.product(range(px.size), range(3)))
    table = JointTable(x[[r[0] for r in rows]], ys[[r[1] for r in rows]], np.array([px[i] * py[j] for i, j in rows]))
    assert check_causality(table)


# -- lift ----------------------------------------------------------------------


def test_lift_identity_coupling():
    w = quantize_wiener(0, 2, 1.0)
    ens = lift_to_sde(zero_control_coupling(w, FINE, x0=1.0), 2000, dt=1e-3)
    np.testing.assert_allclose(ens["X"], 1.0 + ens["W"], atol=1e-12)
    np.testing.assert_allclose(ens["alpha"], 0.0, atol=1e-9)


def test_lift_bridge_to_point():
    w = quantize_wiener(0, 2, 1.0)
    costs = integral_costs(lambda z: 0 * z, lambda u: (u - 1.0) ** 2)
    res = solve_Pn(costs, 0, w, ActionLattice([-1, 0, 1]), x0=1.0)
    ens = lift_to_sde(res.coupling, 10_000, dt=1e-4, record_every=100)
    assert ens["X"][:, -1].var() < 1e-3
    assert ens["X"][:, 5].var() > 1e-3


def test_lift_reproduces_level_zero_cost():
    w = quantize_wiener(0, 2, 1.0)
    res = solve_Pn(QUAD, 0, w, FINE, x0=1.0)
    ens = lift_to_sde(res.coupling, 20_000, dt=1e-2, costs=QUAD)
    # z = -(1 + W_1)/2 and X_1 = (1 + W_1)/2 on every path
    W1 = ens["W"][:, -1]
    np.testing.assert_allclose(ens["X"][:, -1], (1 + W1) / 2, atol=1e-12)
    assert ens.meta["discrete_cost"] == pytest.approx(res.value, abs=0.03)
    # the bridge retargets continuously, so its running rate cost exceeds the continuous value
    assert ens.meta["continuous_cost"] > continuous_quadratic_value()


def test_lift_level_one():
    w = quantize_wiener(1, 2, 1.0)
    res = solve_Pn(QUAD, 1, w, FINE, x0=1.0)
    ens = lift_to_sde(res.coupling, 20_000, dt=1e-2, costs=QUAD)
    assert ens.meta["discrete_cost"] == pytest.approx(res.value, abs=0.05)
    final = res.coupling.terminal_law()
    assert ens["X"][:, -1].mean() == pytest.approx(float(final.mean()[0]), abs=0.03)


def test_lift_is_deterministic_and_validates():
    w = quantize_wiener(0, 2, 1.0)
    c = solve_Pn(QUAD, 0, w, FINE, x0=1.0).coupling
    a = lift_to_sde(c, 100, seed=3, dt=1e-2)
    b = lift_to_sde(c, 100, seed=3, dt=1e-2)
    assert np.array_equal(a["X"], b["X"])
    with pytest.raises(ValueError):
        lift_to_sde(solve_Pn(QUAD, 2, quantize_wiener(2, 2), FINE).coupling, 10)
    with pytest.raises(ValueError):
        lift_to_sde(c, 10, dt=0.3)


def test_growth_probe_and_ladder_rejection():
    assert probe_costs(QUAD)["superlinear_growth"]
    assert probe_costs(integral_costs(lambda z: 0 * z, lambda u: u**2))["superlinear_growth"]
    linear = integral_costs(np.abs, lambda u: u**2)
    assert not probe_costs(linear)["superlinear_growth"]
    with pytest.raises(ValueError, match="superlinear"):
        ladder(linear, 1, {"kind": "binomial", "m": 2}, ActionLattice([-1, 0, 1]))
