from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfcx.core import (
    EmpiricalLaw,
    ModelSpec,
    NoiseStream,
    ParticleEnsemble,
    TimeGrid,
    check_derivatives,
    empirical_law,
    law_stats,
    tilde_mean,
    wasserstein2_1d,
)


def test_time_grid_dyadic():
    g = TimeGrid.dyadic(3, T=2.0)
    assert g.n_steps == 8
    assert g.points[0] == 0.0 and g.points[-1] == 2.0
    assert np.allclose(g.dt, 0.25)
    assert g.is_uniform()


def test_time_grid_rejects_bad_points():
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ValueError):
        TimeGrid(np.array([0.1, 1.0]))
    with pytest.raises(ValueError):
        TimeGrid.from_step(1.0, 0.3)


def _ensemble(values_at_t0):
    v = np.asarray(values_at_t0, dtype=float)
    grid = TimeGrid.uniform(1.0, 1)
    return ParticleEnsemble(grid, {"X": np.stack([v, v + 1], axis=1)})


def test_empirical_law_two_particles():
    law = empirical_law(_ensemble([1.0, 3.0]), 0, ["X"])
    assert sorted(law.atoms[:, 0]) == [1.0, 3.0]
    assert np.allclose(law.weights, 0.5)


def test_empirical_law_single_particle():
    law = empirical_law(_ensemble([2.5]), 1, ["X"])
    assert law.size == 1 and law.weights[0] == 1.0 and law.atoms[0, 0] == 3.5


def test_empirical_law_errors():
    ens = _ensemble([1.0, 2.0])
    with pytest.raises(KeyError):
        empirical_law(ens, 0, ["Y"])
    with pytest.raises(IndexError):
        empirical_law(ens, 5, ["X"])


def test_empirical_law_gaussian_mean():
    n = 100_000
    x = NoiseStream(3).normals(0, n)
    grid = TimeGrid.uniform(1.0, 1)
    ens = ParticleEnsemble(grid, {"X": np.stack([x, x], axis=1)})
    law = empirical_law(ens, 0, ["X"])
    assert abs(law_stats(law)["mean"][0]) < 3 / np.sqrt(n)


def test_ensemble_channels_are_read_only():
    ens = _ensemble([1.0, 2.0])
    with pytest.raises(ValueError):
        ens["X"][0, 0] = 5.0


def test_ensemble_shape_mismatch():
    grid = TimeGrid.uniform(1.0, 2)
    with pytest.raises(ValueError):
        ParticleEnsemble(grid, {"X": np.zeros((3, 3)), "Y": np.zeros((4, 3))})
    with pytest.raises(ValueError):
        ParticleEnsemble(grid, {"X": np.zeros((3, 2))})


def test_law_stats_examples():
    s = law_stats(EmpiricalLaw(np.array([-1.0, 1.0]), np.array([0.5, 0.5])))
    assert s["mean"][0] == 0.0 and s["variance"][0, 0] == 1.0
    s = law_stats(EmpiricalLaw.point_mass(4.0))
    assert s["mean"][0] == 4.0 and s["variance"][0, 0] == 0.0
    s = law_stats(EmpiricalLaw.uniform(np.array([0.0, 1.0, 2.0])))
    assert np.isclose(s["mean"][0], 1.0) and np.isclose(s["variance"][0, 0], 2 / 3)


def test_law_rejects_bad_weights():
    with pytest.raises(ValueError):
        EmpiricalLaw(np.array([0.0, 1.0]), np.array([0.7, 0.7]))
    with pytest.raises(ValueError):
        EmpiricalLaw(np.array([0.0, 1.0]), np.array([1.5, -0.5]))
    with pytest.raises(ValueError):
        EmpiricalLaw(np.zeros((0, 1)), np.zeros(0))


def test_wasserstein_examples():
    p = EmpiricalLaw.uniform(np.array([0.0, 1.0]))
    assert wasserstein2_1d(p, p) == 0.0
    assert np.isclose(wasserstein2_1d(EmpiricalLaw.point_mass(0.0), EmpiricalLaw.point_mass(-2.5)), 2.5)
    assert np.isclose(wasserstein2_1d(p, EmpiricalLaw.point_mass(0.5)), 0.5)
    with pytest.raises(ValueError):
        wasserstein2_1d(EmpiricalLaw.uniform(np.zeros((2, 2))), p)


def test_wasserstein_matches_sorted_coupling_for_equal_sizes():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=50), rng.normal(1.0, 2.0, size=50)
    direct = np.sqrt(np.mean((np.sort(a) - np.sort(b)) ** 2))
    assert np.isclose(wasserstein2_1d(EmpiricalLaw.uniform(a), EmpiricalLaw.uniform(b)), direct)


laws = st.lists(st.tuples(st.floats(-5, 5), st.floats(0.01, 1.0)), min_size=1, max_size=6).map(
    lambda pts: EmpiricalLaw(np.array([p[0] for p in pts]), np.array([p[1] for p in pts]) / sum(p[1] for p in pts))
)


@settings(max_examples=60, deadline=None)
@given(laws, laws, laws)
def test_wasserstein_triangle_and_symmetry(p, q, r):
    pq, qr, pr = wasserstein2_1d(p, q), wasserstein2_1d(q, r), wasserstein2_1d(p, r)
    assert pr <= pq + qr + 1e-10
    assert np.isclose(pq, wasserstein2_1d(q, p), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(laws)
def test_weights_sum_to_one_after_operations(p):
    assert abs(p.weights.sum() - 1) <= 1e-12
    assert abs(p.compress().weights.sum() - 1) <= 1e-12
    assert abs(p.marginal([0]).weights.sum() - 1) <= 1e-12


def test_noise_stream_is_prefix_stable():
    s = NoiseStream(11)
    assert np.array_equal(s.normals(4, 10), s.normals(4, 1000)[:10])
    assert not np.array_equal(s.normals(4, 10), s.normals(5, 10))
    assert not np.array_equal(NoiseStream(12).normals(4, 10), s.normals(4, 10))


def test_noise_increment_variance():
    dt = 0.01
    inc = np.sqrt(dt) * NoiseStream(0).normals(7, 200_000)
    se = dt * np.sqrt(2 / inc.size)
    assert abs(inc.var() - dt) < 4 * se


def _lq_like_model(qbar=0.7, rbar=0.4, s=1.5, sbar=0.5):
    """Scalar model with mean-field state and control costs, used for callback audits."""

    def xbar(law):
        return law.mean()[0]

    def abar(law):
        return law.mean()[1]

    return ModelSpec(
        d=1, k=1, m=1, sigma=np.eye(1),
        b=lambda x, a, law: 0.3 * x + 1.2 * a + 0.2 * xbar(law) - 0.1 * abar(law),
        f=lambda x, a, law: 0.5 * (x[:, 0] ** 2 + qbar * (x[:, 0] - s * xbar(law)) ** 2 + a[:, 0] ** 2
                                   + rbar * (a[:, 0] - sbar * abar(law)) ** 2),
        g=lambda x, law: 0.5 * x[:, 0] ** 2 + np.sin(law.mean()[0]) * x[:, 0],
        db_dx=lambda x, a, law: np.full((x.shape[0], 1, 1), 0.3),
        db_da=lambda x, a, law: np.full((x.shape[0], 1, 1), 1.2),
        df_dx=lambda x, a, law: x + qbar * (x - s * xbar(law)),
        df_da=lambda x, a, law: a + rbar * (a - sbar * abar(law)),
        dg_dx=lambda x, law: x + np.sin(law.mean()[0]),
        db_dmu=lambda x, a, law, xp, ap: np.full((1, 1, 1, 1), 0.2),
        db_dnu=lambda x, a, law, xp, ap: np.full((1, 1, 1, 1), -0.1),
        df_dmu=lambda x, a, law, xp, ap: -qbar * s * (x - s * xbar(law)),
        df_dnu=lambda x, a, law, xp, ap: -rbar * sbar * (a - sbar * abar(law)),
        dg_dmu=lambda x, law, xp: np.cos(law.mean()[0]) * x,
    )


def test_derivative_callbacks_consistent():
    report = check_derivatives(_lq_like_model(), n_points=100, seed=3)
    assert report["ok"], report


def test_derivative_audit_catches_wrong_callback():
    good = _lq_like_model()
    bad = ModelSpec(**{**good.__dict__, "df_dnu": lambda x, a, law, xp, ap: 0.0 * a})
    report = check_derivatives(bad, n_points=20, seed=3)
    assert not report["ok"]
    assert report["worst"]["df_dnu"] > 1e-3


def test_tilde_mean_constant_and_pairwise_kernels():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 1))
    a = rng.normal(size=(30, 1))
    xp = rng.normal(size=(7, 1))
    ap = rng.normal(size=(7, 1))
    const = tilde_mean(lambda x, a, law, xp, ap: 2 * a, x, a, None, xp, ap, (1,))
    assert np.allclose(const, 2 * a.mean())
    pair = tilde_mean(lambda x, a, law, xp, ap: x * ap, x, a, None, xp, ap, (1,), max_elems=40)
    assert np.allclose(pair[:, 0], x.mean() * ap[:, 0])
