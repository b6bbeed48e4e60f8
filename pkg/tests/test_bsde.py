import numpy as np
import pytest

from conftest import UNIT, closed_form_case, rel_l2
from mfgweak.bsde import (RegressionBasis, bmo_estimate, picard_residual, solve_backward,
                          truncation_radii)
from mfgweak.errors import RegressionSingular
from mfgweak.forward import GaussianLaw, TimeGrid, simulate_forward
from mfgweak.measure import LawFlow
from mfgweak.model import ConstantWeight, QuadraticCostModel, SquareTerminal


def test_constant_terminal_is_exact(constant_case):
    _, _, sol, _ = constant_case
    assert np.all(sol.Y == 2.5)
    assert np.all(sol.Z == 0)


def test_martingale_closed_form(martingale):
    paths, _, sol, _ = martingale
    X = paths.X[..., 0]
    for n in range(0, 100, 10):
        assert rel_l2(sol.Y[:, n], X[:, n]) < 0.05
        assert rel_l2(sol.Z[:, n, 0], np.ones(len(X))) < 0.05


def test_heat_closed_form(heat):
    paths, _, sol, _ = heat
    X, t = paths.X[..., 0], paths.grid.nodes
    for n in range(1, 100, 9):
        assert rel_l2(sol.Y[:, n], X[:, n] ** 2 + (1 - t[n])) < 0.03
        assert rel_l2(sol.Z[:, n, 0], 2 * X[:, n]) < 0.05
    assert np.array_equal(sol.Y[:, -1], X[:, -1] ** 2)


def test_degree_enrichment_does_not_hurt(heat):
    paths, _, sol2, _ = heat
    _, _, sol1, _ = closed_form_case(SquareTerminal(), degree=1)
    X = paths.X[..., 0]
    exact = X[:, 50] ** 2 + 0.5
    assert rel_l2(sol2.Y[:, 50], exact) <= rel_l2(sol1.Y[:, 50], exact)


def test_control_variate_orders(heat):
    paths, _, first, _ = heat
    _, _, plain, _ = closed_form_case(SquareTerminal(), control_variate="none")
    X = paths.X[..., 0]
    err = lambda s: rel_l2(s.Z[:, 50, 0], 2 * X[:, 50])
    assert err(first) < err(plain)


def test_quadratic_driver_against_cole_hopf():
    # f = 1, g = x: F = z^2 / 4 and u solves u_t + u_xx / 2 + u_x^2 / 4 = 0,
    # so exp(u / 2) is space-time harmonic and u(t, x) = x + (T - t) / 4
    grid = TimeGrid(0, 1, 50)
    p = simulate_forward(UNIT, GaussianLaw(0.0, 1.0), grid, 4, 8000)
    m = QuadraticCostModel(ConstantWeight(1.0))
    sol = solve_backward(p, m, LawFlow.from_states(p.X), lambda x, mu: x[:, 0], vfs=UNIT)
    t = grid.nodes
    for n in (0, 25, 49):
        assert np.max(np.abs(sol.Y[:, n] - p.X[:, n, 0] - (1 - t[n]) / 4)) < 1e-2
    assert np.allclose(sol.alpha[:, :, 0], 0.5 * sol.Z[:, :, 0], atol=1e-10)


def test_bmo_examples(constant_case, martingale):
    _, _, sol, basis = constant_case
    assert bmo_estimate(sol, constant_case[0], basis) == 0.0
    paths, _, msol, basis = martingale
    msol_c = type(msol)(**{**msol.__dict__, "Z": np.ones_like(msol.Z)})
    assert bmo_estimate(msol_c, paths, basis) == pytest.approx(1.0, rel=1e-6)


def test_picard_residual_examples(heat):
    _, _, sol, _ = heat
    assert picard_residual(sol, sol) == 0.0
    shifted = type(sol)(**{**sol.__dict__, "Y": sol.Y + 0.3})
    assert picard_residual(sol, shifted) == pytest.approx(0.3)


def test_independent_seeds_agree_within_mc_error():
    y0 = []
    for seed in (1, 2, 3, 4):
        paths, _, sol, _ = closed_form_case(SquareTerminal(), n_steps=20, n_particles=4000, seed=seed)
        y0.append(sol.Y[:, 10].mean())
    spread = np.std(y0, ddof=1)
    assert np.ptp(y0) <= 3 * spread * np.sqrt(2) + 1e-12


def test_truncation_radii_shape():
    r = truncation_radii(2.0, 10)
    assert r.shape == (10,) and np.all(np.diff(r) <= 0) and r[0] == pytest.approx(2 * np.sqrt(np.log(11)))


def test_regression_rejects_degenerate_design():
    X = np.zeros((50, 1))
    with pytest.raises(RegressionSingular):
        RegressionBasis(degree=2, ridge=0.0).fit(X + np.r_[0.0, 1.0, np.zeros(48)][:, None], np.ones(50), 0)


def test_solutions_csv(tmp_path, constant_case):
    _, _, sol, _ = constant_case
    sol.to_csv(tmp_path / "s.csv")
    head = (tmp_path / "s.csv").read_text().splitlines()[:2]
    assert head[0] == "particle,step,Y,z0" and head[1].startswith("0,0,2.5,0.0")
