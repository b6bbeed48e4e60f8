import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment

from mfgweak.errors import ModeUnsupported, ShapeMismatch
from mfgweak.measure import (EmpiricalMeasure, LawFlow, assignment_w2sq, coupling_bound_check,
                             lions_derivative, lipschitz_probe_dmu, subsample, wasserstein2)


def test_w2_identical_is_zero():
    mu = EmpiricalMeasure.uniform(np.array([[0.0], [1.0], [3.0]]))
    assert wasserstein2(mu, mu) == 0.0


def test_w2_diracs():
    assert wasserstein2(EmpiricalMeasure.dirac([1.0, 2.0]), EmpiricalMeasure.dirac([4.0, 6.0])) == pytest.approx(5.0)


def test_w2_two_point_example():
    mu = EmpiricalMeasure.uniform(np.array([[0.0], [1.0]]))
    nu = EmpiricalMeasure.uniform(np.array([[0.0], [2.0]]))
    assert wasserstein2(mu, nu) == pytest.approx(np.sqrt(0.5), abs=1e-14)


def test_w2_weighted_1d_against_lp_oracle():
    # discrete transport LP solved with scipy as an independent route
    from scipy.optimize import linprog
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=5), rng.normal(size=7)
    a, b = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(7))
    cost = (x[:, None] - y[None, :]) ** 2
    A = np.vstack([np.kron(np.eye(5), np.ones(7)), np.kron(np.ones(5), np.eye(7))])
    lp = linprog(cost.ravel(), A_eq=A, b_eq=np.r_[a, b], bounds=(0, None), method="highs")
    w = wasserstein2(EmpiricalMeasure(x[:, None], a), EmpiricalMeasure(y[:, None], b))
    assert w**2 == pytest.approx(lp.fun, abs=1e-10)


def test_w2_rejects_dimension_mismatch():
    with pytest.raises(ShapeMismatch):
        wasserstein2(EmpiricalMeasure.dirac([0.0]), EmpiricalMeasure.dirac([0.0, 0.0]))


def test_exact_mode_limit_in_higher_dimension():
    rng = np.random.default_rng(0)
    big = EmpiricalMeasure.uniform(rng.normal(size=(600, 2)))
    with pytest.raises(ModeUnsupported):
        wasserstein2(big, big, mode="exact")
    assert wasserstein2(big, big, mode="sliced") == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000))
def test_w2_is_a_metric_on_uniform_measures(n, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (EmpiricalMeasure.uniform(rng.normal(size=(n, 2))) for _ in range(3))
    ab, bc, ac = wasserstein2(a, b), wasserstein2(b, c), wasserstein2(a, c)
    assert ab == pytest.approx(wasserstein2(b, a), abs=1e-12)
    assert ac <= ab + bc + 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 30), st.integers(0, 10_000))
def test_assignment_matches_independent_hungarian(n, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    cost = ((x[:, None] - y[None]) ** 2).sum(-1)
    r, c = linear_sum_assignment(cost)
    assert assignment_w2sq(x, y) == pytest.approx(cost[r, c].mean(), rel=1e-12)


def test_coupling_identity_and_shift():
    X = np.random.default_rng(1).normal(size=(50, 2))
    w, mse, ok = coupling_bound_check(X, X)
    assert (w, mse, ok) == (0.0, 0.0, True)
    c = np.array([0.3, -0.4])
    w, mse, ok = coupling_bound_check(X, X + c)
    assert w == pytest.approx(0.25, abs=1e-12) and mse == pytest.approx(0.25, abs=1e-12) and ok


def test_coupling_permutation_is_suboptimal_pairing():
    X = np.random.default_rng(2).normal(size=(64, 1))
    Xp = X[np.random.default_rng(3).permutation(64)]
    w, mse, ok = coupling_bound_check(X, Xp)
    assert ok and w < mse


def test_subsample_is_deterministic():
    mu = EmpiricalMeasure.uniform(np.random.default_rng(0).normal(size=(2000, 1)))
    a, b = subsample(mu, 512, seed=9), subsample(mu, 512, seed=9)
    assert np.array_equal(a.points, b.points) and a.size == 512


def test_lions_derivative_linear_functional():
    mu = EmpiricalMeasure.uniform(np.random.default_rng(5).normal(size=(40, 1)))

    def f(m):
        return float(m.weights @ m.points[:, 0] ** 2)

    for i in (0, 7, 31):
        assert lions_derivative(f, mu, i)[0] == pytest.approx(2 * mu.points[i, 0], abs=1e-5)


def test_lions_derivative_constant_and_square_mean():
    mu = EmpiricalMeasure.uniform(np.random.default_rng(6).normal(1.0, 1.0, size=(30, 1)))
    assert np.all(lions_derivative(lambda m: 3.0, mu, 4) == 0)
    d = lions_derivative(lambda m: float(m.mean()[0]) ** 2, mu, 4)
    assert d[0] == pytest.approx(2 * mu.mean()[0], abs=1e-5)


def test_lipschitz_probe():
    rng = np.random.default_rng(7)
    ms = [EmpiricalMeasure.uniform(rng.normal(mu0, 1.0, size=(20, 1))) for mu0 in (0.0, 1.0)]
    lin = lipschitz_probe_dmu(lambda m: float(m.mean()[0]), ms)
    assert lin.C == pytest.approx(0.0, abs=1e-4) and not lin.blow_up
    assert lipschitz_probe_dmu(lambda m: 1.0, ms).C == 0
    sq = lipschitz_probe_dmu(lambda m: float(m.mean()[0]) ** 2, ms)
    assert np.isfinite(sq.C) and sq.C > 0


def test_law_flow_roundtrip(tmp_path):
    X = np.random.default_rng(8).normal(size=(10, 4, 2))
    flow = LawFlow.from_states(X)
    flow.save(tmp_path / "flow")
    back = LawFlow.load(tmp_path / "flow")
    assert len(back) == 4
    for a, b in zip(flow, back):
        assert np.array_equal(a.points, b.points) and np.array_equal(a.weights, b.weights)
