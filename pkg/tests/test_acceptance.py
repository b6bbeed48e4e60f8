"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, SESSION_START, UNIT, rel_l2
from mfgweak.bsde import solve_backward
from mfgweak.cli import run_scenario
from mfgweak.forward import (GaussianLaw, TimeGrid, constant_fields, first_axis_fields, heisenberg_fields,
                             heun_stratonovich, hormander_rank, linear_fields, malliavin_derivative,
                             noise_bump, simulate_forward, sine_fields, tangent_flow)
from mfgweak.master import (check_malliavin_representations, check_z_representation, estimate_master_field,
                            master_equation_residual)
from mfgweak.measure import (EmpiricalMeasure, LawFlow, _w2sq_1d, assignment_w2sq, coupling_bound_check,
                             wasserstein2)
from mfgweak.mfg import flow_distance, girsanov_weights, solve_equilibrium, strong_weak_consistency
from mfgweak.model import (ConstantWeight, LinearTerminal, MeanCouplingTerminal, OscillatingWeight,
                           QuadraticCostModel, QuadraticPotential, QuarticControlModel, SampleSpec,
                           SquareTerminal, optimal_control, verify_assumptions)

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
SUITE_BUDGET = 15 * 60


def report(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)
    assert ok, detail


def test_c01_ito_stratonovich_equivalence():
    start = time.perf_counter()
    grid = TimeGrid(0.0, 1.0, 1000)
    vfs = sine_fields()
    strat = heun_stratonovich(vfs, [0.5], grid, 1, 100_000, store="terminal")
    ito = simulate_forward(vfs.with_ito_drift(), [0.5], grid, 1, 100_000, store="terminal")
    w = wasserstein2(EmpiricalMeasure.uniform(strat.X[:, -1]), EmpiricalMeasure.uniform(ito.X[:, -1]))
    elapsed = time.perf_counter() - start
    report(1, "Ito-Stratonovich equivalence", w <= 1e-2 and elapsed < 60,
           f"W2 = {w:.3e} (tol 1e-2), runtime {elapsed:.1f} s (limit 60 s)")


def test_c02_malliavin_representation():
    vfs = linear_fields().with_ito_drift()
    grid = TimeGrid(0.0, 1.0, 1000)
    paths = simulate_forward(vfs, [1.0], grid, 2, 10_000)
    tf = tangent_flow(vfs, paths)
    errs = []
    for u in range(50, 1000, 100):                       # 10 bump times x 5 horizons = 50 probes
        bump = noise_bump(vfs, paths, u, h=1e-4)
        for t in np.linspace(u + 20, 1000, 5).astype(int):
            D = malliavin_derivative(tf, vfs, paths, u, t)[:, 0, 0]
            errs.append(np.median(np.abs(bump[:, t - u, 0] - D) / np.abs(D)))
    med = float(np.median(errs))
    report(2, "Malliavin representation", len(errs) == 50 and med <= 0.05,
           f"median relative error {med:.4f} over {len(errs)} probes (tol 0.05)")


def test_c03_diagonal_malliavin_equals_z(heat):
    paths, _, sol, basis = heat
    tf = tangent_flow(UNIT, paths)
    probes = [(t, t) for t in range(5, 100, 10)]
    rep = check_malliavin_representations(sol, tf, UNIT, paths, probes, estimate_master_field(sol, paths, basis))
    med = rep["diagonal_median_rel_error"]
    report(3, "D_t Y_t = Z_t (heat)", med <= 0.10, f"median relative error {med:.4f} (tol 0.10)")


def test_c04_z_representation(heat, martingale):
    worst = {}
    for name, (paths, _, sol, basis) in (("heat", heat), ("martingale", martingale)):
        worst[name] = check_z_representation(sol, estimate_master_field(sol, paths, basis), UNIT,
                                             paths)["max_rel_l2_error"]
    ok = max(worst.values()) <= 0.05
    report(4, "Z = grad u sigma", ok,
           f"max per-node rel L2 heat {worst['heat']:.4f}, martingale {worst['martingale']:.4f} (tol 0.05)")


def test_c05_closed_form_bsde(heat):
    paths, _, sol, _ = heat
    X, t = paths.X[..., 0], paths.grid.nodes
    errs = [rel_l2(sol.Y[:, n], X[:, n] ** 2 + (1 - t[n])) for n in range(1, 100)]
    gap = float(np.max(np.abs(sol.Y[:, -1] - X[:, -1] ** 2)))
    report(5, "closed-form BSDE oracle", max(errs) <= 0.03 and gap == 0.0,
           f"max interior rel error {max(errs):.4f} (tol 0.03), terminal gap {gap} (must be 0)")


def test_c06_mfg_fixed_point():
    model = QuadraticCostModel(ConstantWeight(1.0))
    grid = TimeGrid(0.0, 1.0, 50)
    g = MeanCouplingTerminal()
    paths = simulate_forward(UNIT, [1.0], grid, 3, 10_000)
    kw = dict(n_particles=10_000, seed=3, tol=1e-3, max_iter=50, paths=paths)
    dirac = LawFlow.constant(EmpiricalMeasure.dirac([0.0]), grid.N + 1)
    normal = LawFlow.constant(EmpiricalMeasure.uniform(np.random.default_rng(0).normal(size=(512, 1))), grid.N + 1)
    a = solve_equilibrium(model, UNIT, [1.0], grid, g, initial_flow=dirac, damping=1.0, **kw)
    b = solve_equilibrium(model, UNIT, [1.0], grid, g, initial_flow=normal, damping=1.0, **kw)
    c = solve_equilibrium(model, UNIT, [1.0], grid, g, initial_flow=dirac, damping=0.5, **kw)
    d_init = flow_distance(a.flow, b.flow)
    d_damp = flow_distance(a.flow, c.flow)
    iters = (a.iterations, b.iterations, c.iterations)
    ok = all(r.converged for r in (a, b, c)) and max(iters) <= 50 and d_init <= 2e-3 and d_damp <= 2e-3
    report(6, "MFG fixed point", ok,
           f"iterations {iters} (limit 50), init gap {d_init:.2e}, damping gap {d_damp:.2e} (tol 2e-3)")


def test_c07_w2_exactness_and_coupling_bound():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 65))
        x, y = rng.normal(size=n), rng.normal(1.0, 2.0, size=n)
        w = np.full(n, 1 / n)
        worst = max(worst, abs(_w2sq_1d(x, w, y, w) - assignment_w2sq(x[:, None], y[:, None])))

    # pairs produced by the solvers: consecutive nodes, Euler vs Heun, bumped vs base paths
    vfs = sine_fields()
    grid = TimeGrid(0.0, 1.0, 50)
    base = simulate_forward(vfs.with_ito_drift(), [0.5], grid, 11, 4000)
    heun = heun_stratonovich(vfs, [0.5], grid, 11, 4000)
    bumped = base.X[:, 10:] + 0.3 * noise_bump(vfs.with_ito_drift(), base, 10, h=0.3)
    pairs = [(base.X[:, n], base.X[:, n + 1]) for n in range(grid.N)]
    pairs += [(base.X[:, n], heun.X[:, n]) for n in range(0, grid.N + 1, 5)]
    pairs += [(base.X[:, 10 + k], bumped[:, k]) for k in range(0, bumped.shape[1], 5)]
    heis = simulate_forward(heisenberg_fields(), [0.0, 0.0], grid, 12, 512)
    pairs += [(heis.X[:, n], heis.X[:, n + 1]) for n in range(0, grid.N, 5)]
    bound_ok = all(coupling_bound_check(p, q)[2] for p, q in pairs)
    report(7, "W2 exactness and coupling bound", worst <= 1e-12 and bound_ok,
           f"max |quantile - assignment| {worst:.2e} over 1000 instances (tol 1e-12), "
           f"coupling bound held on {len(pairs)} solver pairs: {bound_ok}")


def test_c08_girsanov_consistency():
    c, x0 = 0.5, 0.2
    grid = TimeGrid(0.0, 1.0, 50)
    paths = simulate_forward(UNIT, [x0], grid, 8, 20_000)
    W = girsanov_weights(paths, np.full_like(paths.dW, c))
    zmax = float(np.max(np.abs(W.martingale_zscores())))
    r = strong_weak_consistency(None, UNIT, lambda t, x: np.full((len(x), 1), c), LinearTerminal(),
                                [x0], grid, 20_000, seed=8)
    exact = x0 + c * 1.0
    ok = zmax <= 3 and r.diff <= 3 * r.se and abs(r.J_strong - exact) <= 3 * r.se
    report(8, "Girsanov consistency", ok,
           f"max |z| of mean weight {zmax:.2f} (tol 3), |J_strong - J_weak| = {r.diff:.4f} vs 3 se = "
           f"{3 * r.se:.4f}, J_strong {r.J_strong:.4f} vs exact {exact:.4f}")


def test_c09_optimal_control_closed_form():
    rng = np.random.default_rng(9)
    mu = EmpiricalMeasure.uniform(rng.normal(size=(16, 1)))
    worst = 0.0
    for _ in range(1000):
        f = float(rng.uniform(0.1, 10.0))
        x, z = rng.normal(scale=3, size=1), rng.normal(scale=5, size=1)
        a = optimal_control(QuadraticCostModel(ConstantWeight(f)), x, z, mu)
        worst = max(worst, float(np.max(np.abs(a - z / (2 * f)))))
    osc = QuadraticCostModel(OscillatingWeight())
    xb, zb = rng.normal(scale=3, size=(1000, 1)), rng.normal(scale=5, size=(1000, 1))
    fb = osc.weight.value(xb, mu)[:, None]
    worst = max(worst, float(np.max(np.abs(optimal_control(osc, xb, zb, mu) - zb / (2 * fb)))))
    report(9, "optimal control vs closed form", worst <= 1e-10,
           f"max error {worst:.2e} over 2000 samples (tol 1e-10)")


def test_c10_hormander():
    h = heisenberg_fields()
    r0, r1 = hormander_rank(h, [0.0, 0.0], 0)[0], hormander_rank(h, [0.0, 0.0], 1)[0]
    full = hormander_rank(constant_fields(np.eye(2)), [0.4, -0.3], 0)[0]
    deficient = [hormander_rank(first_axis_fields(2), [0.4, -0.3], k)[0] for k in range(4)]
    ok = (r0, r1, full) == (1, 2, 2) and deficient == [1, 1, 1, 1]
    report(10, "Hormander checker", ok,
           f"Heisenberg ranks {r0}/{r1} (want 1/2), full {full} (want 2), deficient {deficient} (want all 1)")


def test_c11_verify_assumptions():
    good = verify_assumptions(QuadraticCostModel(OscillatingWeight()))
    bad = verify_assumptions(QuarticControlModel(), SampleSpec(a_bound=10.0))
    flagged = sorted({v.assumption for v in bad.violations})
    ok = good.violations == [] and "hess_aa_bounded" in flagged
    report(11, "verify_assumptions", ok,
           f"f|a|^2 violations {len(good.violations)} (want 0), |a|^4 flagged {flagged}")


def _master_residual(n_steps, n_particles, seed=0):
    model = QuadraticCostModel(potential=QuadraticPotential(-1.0))
    p = simulate_forward(UNIT, GaussianLaw(0.0, 1.0), TimeGrid(0.0, 1.0, n_steps), seed, n_particles)
    flow = LawFlow.from_states(p.X)
    sol = solve_backward(p, model, flow, SquareTerminal(), vfs=UNIT)
    return master_equation_residual(estimate_master_field(sol, p), model, UNIT, flow, g=SquareTerminal()).rms


@pytest.mark.run_last
def test_c12_master_residual_refinement_and_budget():
    # settings fixed before any run: seed 0, (N, N_p) = (20, 4096) -> (40, 16384)
    coarse, fine = _master_residual(20, 4096), _master_residual(40, 16384)
    ratio = coarse / fine
    elapsed = time.time() - SESSION_START
    report(12, "master residual refinement", ratio >= 2 and elapsed <= SUITE_BUDGET,
           f"residual {coarse:.4f} -> {fine:.4f}, ratio {ratio:.2f} (want >= 2); "
           f"suite time so far {elapsed:.0f} s (limit {SUITE_BUDGET} s)")


def test_c13_determinism(tmp_path):
    mismatched, compared = [], 0
    for scenario, command in (("heat", "diagnose"), ("mfg", "solve-mfg")):
        runs = []
        for threads in (1, 4):
            code, out = run_scenario(SCENARIOS / f"{scenario}.ini", tmp_path / f"{scenario}-{threads}",
                                     threads=threads, command=command)
            assert code == 0
            runs.append(out)
        for f in sorted(runs[0].rglob("*.csv")):
            rel = f.relative_to(runs[0])
            compared += 1
            if f.read_bytes() != (runs[1] / rel).read_bytes():
                mismatched.append(f"{scenario}/{rel}")
    report(13, "determinism across thread counts", compared > 0 and not mismatched,
           f"{compared} CSV files compared, mismatches: {mismatched or 'none'}")
