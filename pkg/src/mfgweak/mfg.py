"""Weak-formulation equilibrium: change-of-measure weights, weak cost, Picard loop.

Paths are simulated once without control.  A control rule ``alpha`` acts
only through the likelihood ratio

    M_n = exp(sum_k alpha_k . dW_k - 1/2 sum_k |alpha_k|^2 dt),

which turns expectations over the simulated paths into expectations for
the controlled dynamics ``dX = (b + sigma alpha) dt + sigma dW``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .bsde import BsdeSolution, RegressionBasis, solve_backward
from .errors import NoConvergence, ShapeMismatch
from .forward import PathEnsemble, TimeGrid, simulate_forward
from .measure import EmpiricalMeasure, LawFlow, wasserstein2
from .model import as_terminal, monotonicity_check

NOVIKOV_WARN = 1e6


@dataclass
class GirsanovWeights:
    """``logM`` and ``M`` have shape ``(N_p, N+1)``; ``M[:, 0] = 1``."""

    logM: np.ndarray
    M: np.ndarray
    novikov_stat: float

    def martingale_zscores(self) -> np.ndarray:
        """``(mean_i M[i, n] - 1) / se_n`` per node (zero where se vanishes)."""
        n_p = self.M.shape[0]
        mean = self.M.mean(axis=0)
        se = self.M.std(axis=0, ddof=1) / np.sqrt(n_p) if n_p > 1 else np.zeros_like(mean)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, (mean - 1) / se, np.where(np.abs(mean - 1) < 1e-12, 0.0, np.inf))
        return z

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("particle,step,logM,M\n")
            for i in range(self.M.shape[0]):
                for n in range(self.M.shape[1]):
                    fh.write(f"{i},{n},{float(self.logM[i, n])!r},{float(self.M[i, n])!r}\n")


def girsanov_weights(paths: PathEnsemble, controls) -> GirsanovWeights:
    """Left-endpoint discretisation of the stochastic exponential of ``alpha``."""
    if paths.dW is None:
        raise ShapeMismatch("girsanov_weights needs stored increments")
    a = np.asarray(controls, float)
    if a.shape != paths.dW.shape:
        raise ShapeMismatch(f"controls {a.shape} vs increments {paths.dW.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("controls must be finite")
    dt = paths.grid.dt
    sq = np.sum(a**2, axis=2) * dt
    inc = np.sum(a * paths.dW, axis=2) - 0.5 * sq
    logM = np.zeros((a.shape[0], a.shape[1] + 1))
    np.cumsum(inc, axis=1, out=logM[:, 1:])
    with np.errstate(over="ignore"):
        nov = float(np.mean(np.exp(0.5 * sq.sum(axis=1))))
    if not np.isfinite(nov) or nov > NOVIKOV_WARN:
        warnings.warn(f"Novikov statistic {nov:.3e} is large; weights may be unreliable",
                      RuntimeWarning)
    return GirsanovWeights(logM, np.exp(logM), nov)


def _cost_samples(paths, weights, controls, flow, model, g):
    g = as_terminal(g)
    X = paths.X
    N = paths.grid.N
    dt = paths.grid.dt
    run = np.zeros(paths.n_particles)
    if model is not None:
        for n in range(N):
            run += model.L(X[:, n], controls[:, n], flow[n]) * dt
    total = g.value(X[:, N], flow[N]) + run
    M = np.ones(paths.n_particles) if weights is None else weights.M[:, -1]
    return M * total


def weak_cost(paths, weights, controls, flow, model, g, return_se: bool = False):
    """``mean_i M[i, N] (g(X_N, mu_N) + sum_n L(X_n, alpha_n, mu_n) dt)``.

    ``model=None`` means zero running cost.  With ``return_se`` the Monte
    Carlo standard error is returned as well.
    """
    s = _cost_samples(paths, weights, controls, flow, model, g)
    val = float(s.mean())
    if return_se:
        return val, float(s.std(ddof=1) / np.sqrt(len(s))) if len(s) > 1 else 0.0
    return val


# --------------------------------------------------------------------------
# strong versus weak
# --------------------------------------------------------------------------


@dataclass
class ConsistencyResult:
    J_strong: float
    J_weak: float
    diff: float
    se: float

    @property
    def ok(self) -> bool:
        return self.diff <= 3 * self.se


def strong_weak_consistency(model, vfs, alpha_rule, g, initial, grid: TimeGrid, n_particles: int,
                            seed: int = 0) -> ConsistencyResult:
    """Compare the controlled-SDE cost with the reweighted uncontrolled cost.

    ``alpha_rule(t, x)`` returns controls of shape ``(N, m)``.  The strong
    side simulates ``dX = (b + sigma alpha) dt + sigma dW`` on the
    ``strong`` stream; the weak side reweights uncontrolled paths from the
    ``forward`` stream.  Both use the unweighted/weighted empirical laws of
    their own ensemble for any measure argument.
    """
    from .forward import initial_states
    from .rng import particle_normals

    g = as_terminal(g)
    N, dt, m = grid.N, grid.dt, vfs.m
    nodes = grid.nodes

    # strong
    x = initial_states(initial, n_particles, vfs.d, seed)
    dWs = np.sqrt(dt) * particle_normals(seed, "strong", n_particles, (N, m))
    Xs = np.empty((n_particles, N + 1, vfs.d))
    As = np.empty((n_particles, N, m))
    Xs[:, 0] = x
    for n in range(N):
        a = np.asarray(alpha_rule(nodes[n], x), float).reshape(n_particles, m)
        s = vfs.sigma(x)
        x = x + (vfs.b(x) + np.einsum("nij,nj->ni", s, a)) * dt + np.einsum("nij,nj->ni", s, dWs[:, n])
        Xs[:, n + 1] = x
        As[:, n] = a
    strong_paths = PathEnsemble(Xs, dWs, grid, seed, "strong")
    sflow = LawFlow.from_states(Xs)
    ss = _cost_samples(strong_paths, None, As, sflow, model, g)

    # weak
    paths = simulate_forward(vfs, initial, grid, seed, n_particles)
    Aw = np.stack([np.asarray(alpha_rule(nodes[n], paths.X[:, n]), float).reshape(n_particles, m)
                   for n in range(N)], axis=1)
    W = girsanov_weights(paths, Aw)
    wflow = LawFlow.from_states(paths.X, W.M)
    sw = _cost_samples(paths, W, Aw, wflow, model, g)

    Js, Jw = float(ss.mean()), float(sw.mean())
    se = float(np.sqrt(ss.var(ddof=1) / len(ss) + sw.var(ddof=1) / len(sw)))
    return ConsistencyResult(Js, Jw, abs(Js - Jw), se)


# --------------------------------------------------------------------------
# equilibrium
# --------------------------------------------------------------------------


@dataclass
class EquilibriumResult:
    flow: LawFlow
    solution: BsdeSolution
    weights: GirsanovWeights
    iterations: int
    residual_history: list
    converged: bool
    measure_mode: str
    paths: PathEnsemble
    diagnostics: dict = field(default_factory=dict)

    @property
    def controls(self) -> np.ndarray:
        return self.solution.alpha


class _DampedFlow:
    """Law flow ``(1 - c) * foreign + ensemble part`` with weights on the ensemble.

    The ensemble positions never change; damping blends ensemble weights
    and shrinks the mass of a foreign initial guess geometrically.
    """

    def __init__(self, X, ens_w=None, foreign: LawFlow | None = None):
        self.X = X
        n_p, n_nodes = X.shape[:2]
        self.ens_w = np.zeros((n_p, n_nodes)) if ens_w is None else ens_w
        self.foreign = foreign
        self.foreign_mass = np.ones(n_nodes) if foreign is not None else np.zeros(n_nodes)

    def measure(self, n) -> EmpiricalMeasure:
        if self.foreign is None or self.foreign_mass[n] == 0:
            return EmpiricalMeasure(self.X[:, n], self.ens_w[:, n])
        f = self.foreign[n]
        pts = np.concatenate([self.X[:, n], f.points])
        w = np.concatenate([self.ens_w[:, n], self.foreign_mass[n] * f.weights])
        return EmpiricalMeasure(pts, w)

    def flow(self) -> LawFlow:
        return LawFlow([self.measure(n) for n in range(self.X.shape[1])])

    def damped(self, cand_w, theta) -> "_DampedFlow":
        cand = cand_w / cand_w.sum(axis=0, keepdims=True)
        out = _DampedFlow(self.X, (1 - theta) * self.ens_w + theta * cand)
        if self.foreign is not None and theta < 1:
            out.foreign = self.foreign
            out.foreign_mass = (1 - theta) * self.foreign_mass
            if out.foreign_mass.max() < 1e-15:
                out.foreign, out.foreign_mass = None, np.zeros_like(out.foreign_mass)
        return out


def flow_distance(a: LawFlow, b: LawFlow) -> float:
    """``sup_n W2(a_n, b_n)``; sliced in dimension > 1 for weighted laws."""
    best = 0.0
    for ma, mb in zip(a, b):
        mode = "exact"
        if ma.dim > 1 and not (ma.is_uniform and mb.is_uniform and ma.size == mb.size <= 512):
            mode = "sliced"
        best = max(best, float(wasserstein2(ma, mb, mode=mode)))
    return best


def solve_equilibrium(model, vfs, initial, grid: TimeGrid, g, n_particles: int, seed: int = 0,
                      damping: float = 1.0, tol: float = 1e-3, max_iter: int = 50,
                      measure_mode: str = "tilted", basis: RegressionBasis | None = None,
                      initial_flow: LawFlow | None = None, control_variate: str = "first",
                      threads: int = 1, paths: PathEnsemble | None = None) -> EquilibriumResult:
    """Damped Picard iteration on the law flow.

    Each iteration solves the backward equation on the current flow,
    converts the minimising controls into likelihood-ratio weights and
    forms the candidate flow (weighted when ``measure_mode="tilted"``).
    The next flow is ``(1 - damping) * current + damping * candidate``.
    Iteration stops when ``sup_n W2`` between successive flows drops below
    ``tol``.  On failure :class:`NoConvergence` is raised with the last
    result attached as ``exc.result``.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    if measure_mode not in ("tilted", "untilted"):
        raise ValueError(f"unknown measure_mode {measure_mode!r}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    g = as_terminal(g)
    basis = basis or RegressionBasis()
    if paths is None:
        paths = simulate_forward(vfs, initial, grid, seed, n_particles, threads=threads)
    X = paths.X
    n_p, n_nodes = X.shape[:2]
    ones = np.ones((n_p, n_nodes))

    def candidate(W):
        return W.M if measure_mode == "tilted" else ones

    def solve(flow, alpha0=None):
        return solve_backward(paths, model, flow, g, basis, vfs, control_variate, alpha0=alpha0)

    coupled = (model is not None and model.measure_dependent) or g.measure_dependent
    diags = {"weight_zscore_max": [], "monotonicity_min": None}

    if not coupled:
        flow0 = initial_flow or LawFlow.from_states(X)
        sol = solve(flow0)
        W = girsanov_weights(paths, sol.alpha)
        diags["weight_zscore_max"].append(float(np.abs(W.martingale_zscores()).max()))
        flow = LawFlow.from_states(X, candidate(W))
        diags.update(_mode_report(X, W, measure_mode))
        return EquilibriumResult(flow, sol, W, 1, [0.0], True, measure_mode, paths, diags)

    state = _DampedFlow(X, foreign=initial_flow) if initial_flow is not None else _DampedFlow(X, ones / n_p)
    flow = state.flow()
    history = []
    alpha = None
    mono = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        sol = solve(flow, alpha)
        alpha = sol.alpha
        W = girsanov_weights(paths, alpha)
        diags["weight_zscore_max"].append(float(np.abs(W.martingale_zscores()).max()))
        state = state.damped(candidate(W), damping)
        new_flow = state.flow()
        history.append(flow_distance(flow, new_flow))
        mono.append(_monotonicity_evidence(model, g, flow[-1], new_flow[-1]))
        flow = new_flow
        if history[-1] < tol:
            converged = True
            break

    sol = solve(flow, alpha)
    W = girsanov_weights(paths, sol.alpha)
    diags["monotonicity_min"] = float(min(mono)) if mono else None
    diags.update(_mode_report(X, W, measure_mode))
    result = EquilibriumResult(flow, sol, W, it, history, converged, measure_mode, paths, diags)
    if not converged:
        exc = NoConvergence(max_iter, history)
        exc.result = result
        raise exc
    return result


def _mode_report(X, W, mode):
    tilted = LawFlow.from_states(X, W.M)
    untilted = LawFlow.from_states(X)
    return {"measure_mode": mode, "tilted_vs_untilted_sup_w2": flow_distance(tilted, untilted)}


def _monotonicity_evidence(model, g, mu, nu):
    vals = [monotonicity_check(lambda x, m: g.value(x, m), mu, nu)]
    if model is not None and model.measure_dependent:
        for a in (-1.0, 0.0, 1.0):
            def B(x, m, a=a):
                return model.L(x, np.full((len(x), model.dim_control), a), m)
            vals.append(monotonicity_check(B, mu, nu))
    return min(vals)
