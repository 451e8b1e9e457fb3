import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from closednet import _kernels, fluid, pfopt
from closednet.model import NetworkModel, bundled_model
import oracles

C1 = bundled_model("c1")
T1 = bundled_model("t1")
SIX = bundled_model("six")
BUNDLED = [C1, T1, SIX]


def kernel_rates(model, m):
    lay = _kernels.pair_layout(model)
    lam = np.zeros(lay.P)
    ok = _kernels.fluid_rates(lay.flatten(m), lay.pq, lay.mu, lay.inv_mu, lay.prevp, lay.qptr, lay.qpairs,
                              lay.J, lam, 10 * lay.P + 10)
    assert ok
    return lay.unflatten(lam)


def test_single_class_rate_is_mu():
    lam = fluid.ps_rates(T1, [[0.3, 0], [0, 0.2], [0.7, 0.8]])
    assert lam[0, 0] == pytest.approx(2.0) and lam[1, 1] == pytest.approx(2.0)
    np.testing.assert_allclose(lam[2], [0.7 / 1.5, 0.8 / 1.5])


def test_empty_queue_passes_inflow():
    m = NetworkModel.build(["1", "2"], {"r": ["1", "2"]}, {("1", "r"): 1, ("2", "r"): 3})
    lam = fluid.ps_rates(m, [[2.0], [0.0]])
    np.testing.assert_allclose(lam[:, 0], [1.0, 1.0])


def test_empty_queue_over_capacity_is_capped():
    lam = fluid.ps_rates(C1, [[0.0], [3.0]])
    np.testing.assert_allclose(lam[:, 0], [1.0, 2.0])


@pytest.mark.parametrize("seed", range(20))
def test_kernel_rates_match_reference(seed):
    rng = np.random.default_rng(seed)
    model = oracles.random_model(rng)
    m = fluid.random_state(model, rng.integers(1, 4, model.I), rng)
    m[m < np.quantile(m[model.incidence], 0.4)] = 0.0
    np.testing.assert_allclose(kernel_rates(model, m), fluid.ps_rates(model, m), rtol=1e-12, atol=1e-14)


def test_c1_piecewise_linear():
    # queue 2 drains at rate 1 until it empties at t = 1/2
    tr = fluid.integrate(C1, [[0.5], [0.5]], 2.0, step=1e-3)
    ref = np.maximum(0.5 - tr.times, 0.0)
    np.testing.assert_allclose(tr.states[:, 1, 0], ref, atol=1e-9)
    assert tr.events == 1


def test_c1_drains_to_bottleneck():
    tr = fluid.integrate(C1, [[0.0], [3.0]], 5.0)
    np.testing.assert_allclose(tr.states[:, 1, 0], np.maximum(3.0 - tr.times, 0.0), atol=1e-9)
    np.testing.assert_allclose(tr.final()[:, 0], [3.0, 0.0], atol=1e-12)


def test_matches_ode_solver_while_occupied():
    rng = np.random.default_rng(4)
    m0 = fluid.random_state(SIX, [1, 1, 1], rng)
    lay = _kernels.pair_layout(SIX)

    def rhs(_, y):
        mj = np.bincount(lay.pq, weights=y, minlength=SIX.J)
        lam = lay.mu * y / mj[lay.pq]
        return lam[lay.prevp] - lam

    T = 0.02
    sol = solve_ivp(rhs, (0, T), lay.flatten(m0), rtol=1e-12, atol=1e-14)
    tr = fluid.integrate(SIX, m0, T, step=1e-6, record_every=1000)
    assert tr.events == 0
    np.testing.assert_allclose(lay.flatten(tr.final()), sol.y[:, -1], atol=1e-5)


@pytest.mark.parametrize("model", BUNDLED)
def test_conservation_and_rate_bounds(model):
    n = model.population_array()
    m0 = fluid.random_state(model, n, np.random.default_rng(2))
    tr = fluid.integrate(model, m0, 20.0, record_every=10)
    np.testing.assert_allclose(tr.states.sum(axis=1), np.broadcast_to(n, (len(tr.times), model.I)), rtol=1e-9)
    assert np.all(tr.states >= 0)
    assert np.all(tr.rates >= 0) and np.all(tr.rates <= model.mu_max * (1 + 1e-12))
    load = (tr.rates * model.inv_mu).sum(axis=2)
    assert np.all(load <= 1 + 1e-12)


@pytest.mark.parametrize("model", BUNDLED)
@pytest.mark.parametrize("seed", range(3))
def test_entropy_nonincreasing(model, seed):
    m0 = fluid.random_state(model, model.population_array(), np.random.default_rng(seed))
    h = 1e-3 / model.mu_max
    tr = fluid.integrate(model, m0, 5.0, step=h)
    d = np.array([fluid.entropy_derivative(model, s, lam) for s, lam in zip(tr.states, tr.rates)])
    assert np.all(np.diff(tr.beta) <= 10 * h * np.abs(d[:-1]) + 1e-12)


@pytest.mark.parametrize("model", BUNDLED)
@pytest.mark.parametrize("seed", range(3))
def test_derivative_matches_finite_differences(model, seed):
    m0 = fluid.random_state(model, model.population_array(), np.random.default_rng(seed))
    for h in (1e-3, 1e-4):
        tr = fluid.integrate(model, m0, 0.5, step=h)
        fd = (tr.beta[2:] - tr.beta[:-2]) / (2 * h)
        d = np.array([fluid.entropy_derivative(model, s, lam) for s, lam in zip(tr.states[1:-1], tr.rates[1:-1])])
        occ = np.array([np.all(s.sum(axis=1) > 0) for s in tr.states])
        ok = occ[:-2] & occ[1:-1] & occ[2:]
        if ok.any():
            assert np.max(np.abs(fd - d)[ok]) <= 50 * h * max(1.0, np.abs(d).max())


@pytest.mark.parametrize("model", BUNDLED)
def test_descent_bound_pointwise(model):
    rng = np.random.default_rng(9)
    for _ in range(200):
        m = fluid.random_state(model, model.population_array(), rng)
        lam = fluid.ps_rates(model, m)
        assert fluid.entropy_derivative(model, m, lam) <= fluid.descent_bound(model, lam) + 1e-12


@pytest.mark.parametrize("model", BUNDLED)
def test_attraction(model):
    n = model.population_array()
    rep = pfopt.solve_pf(model, n)
    rng = np.random.default_rng(21)
    for _ in range(5):
        tr = fluid.integrate(model, fluid.random_state(model, n, rng), 200.0 / model.mu_min, record_every=1000)
        assert tr.beta[-1] - rep.beta_star < 1e-3
        assert fluid.optimal_set_membership(model, n, rep, tr.final(), tol=1e-2).member


def test_entropy_values():
    m = NetworkModel.build(["1", "2"], {"a": ["1"], "b": ["2"]}, {("1", "a"): 1, ("2", "b"): 1})
    assert fluid.entropy(m, [[2.0, 0], [0, 3.0]]) == 0.0
    # m_1a = 1 at rate 2 gives log 2; route b alone at queue 3 gives log 1
    assert fluid.entropy(T1, [[1.0, 0], [0, 0], [0, 1.0]]) == pytest.approx(math.log(2))
    assert fluid.entropy(T1, [[0, 0], [0, 0], [1.0, 1.0]]) == pytest.approx(2 * math.log(0.5))


def test_entropy_derivative_c1():
    assert fluid.entropy_derivative(C1, [[1.0], [2.0]]) == pytest.approx(-math.log(2))


@pytest.mark.parametrize("model", BUNDLED)
def test_derivative_zero_on_optimal_set(model):
    rep = pfopt.solve_pf(model)
    m = pfopt.optimal_fluid_state(rep)
    assert fluid.entropy_derivative(model, m) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("model", BUNDLED)
def test_optimal_state_is_fixed_point(model):
    rep = pfopt.solve_pf(model)
    m = pfopt.optimal_fluid_state(rep)
    tr = fluid.integrate(model, m, 5.0, record_every=100)
    np.testing.assert_allclose(tr.states, np.broadcast_to(m, tr.states.shape), atol=1e-8)
    for i, r in enumerate(model.routes):
        np.testing.assert_allclose(tr.rates[-1][list(r), i], rep.allocation[i], rtol=1e-7)


def test_t1_mass_moves_to_shared_queue():
    tr = fluid.integrate(T1, [[1.0, 0], [0, 1.0], [0, 0]], 200.0, record_every=1000)
    final = tr.final()
    np.testing.assert_allclose(final[2], [1.0, 1.0], atol=1e-6)
    np.testing.assert_allclose(final[2] / final[2].sum(), [0.5, 0.5], atol=1e-6)


def test_membership_examples():
    rep = pfopt.solve_pf(C1, [3])
    assert fluid.optimal_set_membership(C1, [3], rep, [[3.0], [0.0]]).member
    rep = pfopt.solve_pf(T1, [1, 1])
    assert fluid.optimal_set_membership(T1, [1, 1], rep, [[0, 0], [0, 0], [1.0, 1.0]]).member
    bad = fluid.optimal_set_membership(T1, [1, 1], rep, [[0.5, 0], [0, 0], [0.5, 1.0]])
    assert not bad.member
    assert any(v.startswith("(a)") for v in bad.violations)
    assert "member: false" in bad.to_text()


def test_trajectory_csv_and_interpolation():
    tr = fluid.integrate(C1, [[0.5], [0.5]], 1.0, step=1e-2)
    lines = tr.to_csv(0.0).splitlines()
    assert lines[0] == "t,beta,beta_gap,m_1:r,m_2:r"
    assert len(lines) == len(tr.times) + 1
    mid = tr.at([0.255])[0]
    assert mid[1, 0] == pytest.approx(0.245, abs=1e-9)


def test_bad_inputs():
    with pytest.raises(ValueError):
        fluid.integrate(C1, [[-1.0], [1.0]], 1.0)
    with pytest.raises(ValueError):
        fluid.integrate(C1, [[1.0], [1.0]], 0.0)
