"""Decoupling field estimates and the representation diagnostics built on them.

The decoupling field is only available along the computed flow: ``u_n(x)``
is the regression of ``Y_n`` on the forward state at node ``n``, so it
stands for ``u(t_n, x, mu_n)`` and says nothing about other measures.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import gaussian_kde

from .bsde import BsdeSolution, RegressionBasis
from .errors import BandwidthInvalid, InsufficientNodes, MissingEvaluator, ShapeMismatch
from .forward import (TangentFlow, VectorFieldSet, malliavin_derivative, noise_bump, simulate_forward,
                      step_factors, tangent_flow)
from .measure import EmpiricalMeasure, LawFlow, default_lions_step
from .model import (LagrangianModel, TerminalCost, as_terminal, driver_derivatives, driver_dmu,
                    optimal_control)

PROXY_LABEL = "particle-shift proxy, order O(h^2) + O(1/N_p)"


def _relerr(a, b, eps=1e-12):
    """Per-row ``|a - b| / |b|`` with rows where both vanish counted as exact."""
    a = np.asarray(a, float).reshape(len(a), -1)
    b = np.asarray(b, float).reshape(len(b), -1)
    num = np.linalg.norm(a - b, axis=1)
    den = np.linalg.norm(b, axis=1)
    return np.where(num <= eps, 0.0, num / np.maximum(den, eps))


# --------------------------------------------------------------------------
# master field
# --------------------------------------------------------------------------


@dataclass
class MasterFieldEstimate:
    """Per-node fits ``u_n``; ``fits[n]`` represents ``u(t_n, ., mu_n)``."""

    fits: list
    basis: RegressionBasis
    residuals: np.ndarray
    nodes: np.ndarray
    factor: float = 1.0

    def u(self, n, x) -> np.ndarray:
        return self.factor * self.fits[n].predict(np.asarray(x, float))

    def grad(self, n, x) -> np.ndarray:
        return self.factor * self.fits[n].gradient(np.asarray(x, float))

    def hess(self, n, x) -> np.ndarray:
        return self.factor * self.fits[n].hessian(np.asarray(x, float))

    def scaled(self, c: float) -> "MasterFieldEstimate":
        return MasterFieldEstimate(self.fits, self.basis, self.residuals, self.nodes, self.factor * c)

    def slices_table(self, xs) -> np.ndarray:
        """Rows ``(t_n, x, u_n(x))`` for every node and every ``x`` in ``xs`` (1-d)."""
        xs = np.asarray(xs, float).reshape(-1, 1)
        rows = []
        for n, t in enumerate(self.nodes):
            for x, v in zip(xs[:, 0], self.u(n, xs)):
                rows.append((t, x, v))
        return np.array(rows)


def estimate_master_field(sol: BsdeSolution, paths, basis: RegressionBasis | None = None) -> MasterFieldEstimate:
    """Regress ``Y[:, n]`` on the state at every node."""
    basis = basis or RegressionBasis()
    fits = [basis.fit(paths.X[:, n], sol.Y[:, n], n) for n in range(sol.Y.shape[1])]
    res = np.array([float(f.residual_rms[0]) for f in fits])
    return MasterFieldEstimate(fits, basis, res, paths.grid.nodes)


def check_z_representation(sol: BsdeSolution, mf: MasterFieldEstimate, vfs: VectorFieldSet, paths) -> dict:
    """Per-node ``rms|Z - grad u_n sigma| / (rms|Z| + eps)``."""
    errs = []
    eps = 1e-12
    for n in range(sol.n_steps):
        x = paths.X[:, n]
        rep = np.einsum("nd,ndm->nm", mf.grad(n, x), vfs.sigma(x))
        diff = np.sqrt(np.mean(np.sum((sol.Z[:, n] - rep) ** 2, axis=1)))
        scale = np.sqrt(np.mean(np.sum(sol.Z[:, n] ** 2, axis=1)))
        errs.append(0.0 if diff <= eps else float(diff / (scale + eps)))
    errs = np.array(errs)
    return {"rel_l2_error": errs.tolist(), "max_rel_l2_error": float(errs.max())}


def check_malliavin_representations(sol: BsdeSolution, tf: TangentFlow, vfs: VectorFieldSet, paths,
                                    probes, mf: MasterFieldEstimate | None = None,
                                    h: float = 1e-4) -> dict:
    """Compare tangent-flow formulas with increment-bump oracles.

    For each probe ``(u, t)`` with ``u < t`` the formula
    ``grad u_t(X_t) J_t Jinv_u sigma(X_u)`` is compared with the bump
    oracle ``(u_t(X_t^bump) - u_t(X_t)) / h`` where ``dW[u]`` is bumped.
    Probes with ``u == t`` compare ``D_t Y_t`` (bump of the increment just
    before ``t``) with ``Z_t``.  Probes with ``t < u`` check the zero rule.
    """
    if mf is None:
        mf = estimate_master_field(sol, paths)
    m = vfs.m
    pair_err, diag_err, zero_ok = [], [], True
    cache = {}

    def bumped(u, l):
        if (u, l) not in cache:
            cache[(u, l)] = noise_bump(vfs, paths, u, h, l)
        return cache[(u, l)]

    for u, t in probes:
        if t < u:
            zero_ok &= bool(np.all(malliavin_derivative(tf, vfs, paths, u, t) == 0))
            continue
        if u == t:
            if t == 0 or t >= sol.n_steps:
                continue
            x = paths.X[:, t]
            oracle = np.stack([(mf.u(t, x + h * bumped(t - 1, l)[:, 1]) - mf.u(t, x)) / h
                               for l in range(m)], axis=1)
            diag_err.append(float(np.median(_relerr(oracle, sol.Z[:, t]))))
            continue
        x = paths.X[:, t]
        D = malliavin_derivative(tf, vfs, paths, u, t)                 # (N, d, m)
        form = np.einsum("nd,ndm->nm", mf.grad(t, x), D)
        oracle = np.stack([(mf.u(t, x + h * bumped(u, l)[:, t - u]) - mf.u(t, x)) / h
                           for l in range(m)], axis=1)
        pair_err.append(float(np.median(_relerr(form, oracle))))
    return {
        "pair_median_rel_error": float(np.median(pair_err)) if pair_err else None,
        "pair_errors": pair_err,
        "diagonal_median_rel_error": float(np.median(diag_err)) if diag_err else None,
        "diagonal_errors": diag_err,
        "zero_rule_ok": zero_ok,
    }


# --------------------------------------------------------------------------
# variational BSDE
# --------------------------------------------------------------------------


@dataclass
class TangentSolution:
    """``gradY`` is ``(N_p, N+1, d)``; ``gradZ`` is ``(N_p, N, m, d)``."""

    gradY: np.ndarray
    gradZ: np.ndarray
    copy_particles: int
    notes: list = field(default_factory=list)


def _has_dmu(obj, base_cls, name="dmu"):
    return getattr(type(obj), name) is not getattr(base_cls, name)


def solve_tangent_bsde(paths, tf: TangentFlow, sol: BsdeSolution, model: LagrangianModel | None,
                       flow: LawFlow, g, vfs: VectorFieldSet, basis: RegressionBasis | None = None,
                       initial=None, copy_particles: int | None = None, seed: int | None = None,
                       chunk: int = 256) -> TangentSolution:
    """Backward regression solve of the linear variational BSDE.

    The solution is split as ``grad Y_n = P_n J_n + R_n``: the first part
    carries the pathwise Jacobian (its conditional expectations are Markov
    in ``X_n`` once ``J_{n+1} = (I + A_n) J_n`` is factored), the second
    carries the mean-field terms, whose expectations over an independent
    copy of the ensemble (stream ``copy``) are computed in chunks.
    """
    basis = basis or RegressionBasis()
    g = as_terminal(g)
    X, dW = paths.X, paths.dW
    n_p, N, m = dW.shape
    d = X.shape[2]
    dt = paths.grid.dt
    eye = np.eye(d)
    mean_field = (model is not None and model.measure_dependent) or g.measure_dependent
    if g.measure_dependent and not _has_dmu(g, TerminalCost):
        raise MissingEvaluator("terminal cost depends on the measure but has no d_mu evaluator")
    if model is not None and model.measure_dependent and not _has_dmu(model, LagrangianModel):
        raise MissingEvaluator("Lagrangian depends on the measure but has no d_mu evaluator")

    # driver derivatives along the solution
    gx = np.zeros((n_p, N, d))
    gz = np.zeros((n_p, N, m))
    if model is not None:
        for n in range(N):
            dd = driver_derivatives(model, X[:, n], sol.Z[:, n], flow[n], a=sol.alpha[:, n])
            gx[:, n], gz[:, n] = dd.grad_x, dd.grad_z

    # mean-field sources from an independent copy
    K = np.zeros((n_p, N, d))
    R_T = np.zeros((n_p, d))
    notes = []
    n_copy = 0
    if mean_field:
        if initial is None or seed is None:
            raise ValueError("mean-field tangent solve needs the initial law and seed for the copy")
        n_copy = copy_particles or n_p
        cp = simulate_forward(vfs, initial, paths.grid, seed, n_copy, stream="copy")
        ctf = tangent_flow(vfs, cp)
        R_T = _pair_average(lambda xi, vj: g.dmu(xi, flow[N], vj), X[:, N], cp.X[:, N], ctf.J[:, N], chunk)
        if model is not None and model.measure_dependent:
            for n in range(N):
                def fn(xi, vj, idx, n=n):
                    return driver_dmu(model, xi, sol.Z[idx, n], flow[n], vj, a=sol.alpha[idx, n])
                K[:, n] = _pair_average(fn, X[:, n], cp.X[:, n], ctf.J[:, n], chunk, pass_index=True)
        notes.append(f"mean-field expectations over an independent copy of {n_copy} particles")

    # Markov part: P_N = grad_x g(X_N)
    P = g.grad_x(X[:, N], flow[N])                       # (N_p, d)
    gradY = np.empty((n_p, N + 1, d))
    gradZ = np.empty((n_p, N, m, d))
    gradY[:, N] = np.einsum("nd,nde->ne", P, tf.J[:, N]) + R_T
    R = R_T
    for n in range(N - 1, -1, -1):
        x = X[:, n]
        A = step_factors(vfs, x, dW[:, n], dt)
        fmap = basis.layout(x)
        Ax = fmap.features(x)
        tgt = np.einsum("nd,nde->ne", P, eye + A)        # P_{n+1} (I + A_n)
        Pm = Ax @ basis.fit(x, tgt, n, fmap=fmap, design=Ax).coef
        Q = Ax @ basis.fit(x, ((tgt - Pm)[:, None, :] * dW[:, n][:, :, None]).reshape(n_p, -1) / dt,
                           n, fmap=fmap, design=Ax).coef
        Q = Q.reshape(n_p, m, d)
        Rm = Ax @ basis.fit(x, R, n, fmap=fmap, design=Ax).coef
        RZ = Ax @ basis.fit(x, ((R - Rm)[:, None, :] * dW[:, n][:, :, None]).reshape(n_p, -1) / dt,
                            n, fmap=fmap, design=Ax).coef
        RZ = RZ.reshape(n_p, m, d)
        P = Pm + (gx[:, n] + np.einsum("nm,nmd->nd", gz[:, n], Q)) * dt
        R = Rm + (np.einsum("nm,nmd->nd", gz[:, n], RZ) + K[:, n]) * dt
        gradY[:, n] = np.einsum("nd,nde->ne", P, tf.J[:, n]) + R
        gradZ[:, n] = np.einsum("nmd,nde->nme", Q, tf.J[:, n]) + RZ
    return TangentSolution(gradY, gradZ, n_copy, notes)


def _pair_average(fn, X, V, J, chunk, pass_index=False):
    """``out[i] = mean_j fn(X_i, V_j) @ J_j`` computed in particle chunks."""
    n_p, d = X.shape
    n_c = len(V)
    out = np.zeros((n_p, d))
    for s in range(0, n_p, chunk):
        idx = np.arange(s, min(s + chunk, n_p))
        xi = np.repeat(X[idx], n_c, axis=0)
        vj = np.tile(V, (len(idx), 1))
        vals = fn(xi, vj, np.repeat(idx, n_c)) if pass_index else fn(xi, vj)
        vals = vals.reshape(len(idx), n_c, d)
        out[idx] = np.einsum("ijd,jde->ie", vals, J) / n_c
    return out


# --------------------------------------------------------------------------
# master-equation residual
# --------------------------------------------------------------------------


@dataclass
class MasterResidual:
    rms: float
    per_node: list
    measure_terms: str
    terminal_gap: float
    notes: list = field(default_factory=list)

    def __float__(self):
        return self.rms

    def to_dict(self):
        return {"rms": self.rms, "per_node": self.per_node, "measure_terms": self.measure_terms,
                "terminal_gap": self.terminal_gap, "notes": self.notes}


def master_equation_residual(mf: MasterFieldEstimate, model: LagrangianModel, vfs: VectorFieldSet,
                             flow: LawFlow, n_points: int = 256, nodes=None, g=None,
                             measure_field: Callable | None = None, n_measure_points: int = 16,
                             h: float | None = None) -> MasterResidual:
    """Plug the estimated field into the first-order master equation.

    At interior nodes and at the first ``n_points`` support points of
    ``mu_n`` the residual is::

        d_t u + b . grad u + 1/2 Tr[sigma sigma^T D^2 u]
              + L(x, a*(x, grad u sigma, mu), mu)
              + int b(v) . d_mu u(v) dmu(v) + 1/2 int Tr[sigma sigma^T(v) d_v d_mu u(v)] dmu(v)

    with a central difference in time.  The two measure terms need
    ``measure_field(n, x, mu)``, a version of ``u`` that accepts other
    measures; they are evaluated with the particle-shift Lions proxy on
    ``n_measure_points`` particles.  Without it they are zero, which is
    exact when the field does not depend on the measure.
    """
    n_nodes = len(mf.fits)
    if n_nodes < 3:
        raise InsufficientNodes(f"need at least 3 nodes, got {n_nodes}")
    dt = float(mf.nodes[1] - mf.nodes[0])
    nodes = range(1, n_nodes - 1) if nodes is None else nodes
    per_node, allr = [], []
    for n in nodes:
        if not 1 <= n <= n_nodes - 2:
            raise InsufficientNodes(f"node {n} has no neighbours on both sides")
        mu = flow[n]
        x = mu.points[:n_points]
        s = vfs.sigma(x)
        grad = mf.grad(n, x)
        dtu = (mf.u(n + 1, x) - mf.u(n - 1, x)) / (2 * dt)
        drift = np.sum(vfs.b(x) * grad, axis=1)
        a_ = np.einsum("ndm,nem->nde", s, s)
        diff = 0.5 * np.einsum("nde,nde->n", a_, mf.hess(n, x))
        z = np.einsum("nd,ndm->nm", grad, s)
        run = model.L(x, optimal_control(model, x, z, mu), mu) if model is not None else 0.0
        r = dtu + drift + diff + run
        if measure_field is not None:
            r = r + _measure_terms(measure_field, n, x, mu, vfs, n_measure_points, h)
        per_node.append(float(np.sqrt(np.mean(r**2))))
        allr.append(r)
    rms = float(np.sqrt(np.mean(np.concatenate(allr) ** 2)))
    gap = float("nan")
    if g is not None:
        g = as_terminal(g)
        xN = flow[n_nodes - 1].points[:n_points]
        gap = float(np.max(np.abs(mf.u(n_nodes - 1, xN) - g.value(xN, flow[n_nodes - 1]))))
    if measure_field is None:
        label = "omitted: field estimated along the flow only (exact for measure-independent fields)"
        notes = ["u_n is the flow-restricted field; off-flow measure arguments are not reachable"]
    else:
        label = PROXY_LABEL
        notes = []
    return MasterResidual(rms, per_node, label, gap, notes)


def _measure_terms(U, n, x, mu: EmpiricalMeasure, vfs, k, h):
    """``int b . d_mu U dmu + 1/2 int Tr[a d_v d_mu U] dmu`` by particle shifts."""
    h = h or default_lions_step(mu)
    d = mu.dim
    idx = np.arange(min(k, mu.size))
    w = mu.weights[idx] / mu.weights[idx].sum()

    def dmu_at(measure, j):
        out = np.empty((len(x), d))
        for c in range(d):
            e = np.zeros(d)
            e[c] = h
            out[:, c] = (U(n, x, measure.shifted(j, e)) - U(n, x, measure.shifted(j, -e))) / (2 * h * measure.weights[j])
        return out

    total = np.zeros(len(x))
    for wj, j in zip(w, idx):
        v = mu.points[j][None]
        g0 = dmu_at(mu, j)
        total += wj * (g0 @ vfs.b(v)[0])
        av = (vfs.sigma(v) @ np.swapaxes(vfs.sigma(v), 1, 2))[0]
        hv = 10 * h
        dv = np.empty((len(x), d, d))
        for c in range(d):
            e = np.zeros(d)
            e[c] = hv
            dv[:, :, c] = (dmu_at(mu.shifted(j, e), j) - dmu_at(mu.shifted(j, -e), j)) / (2 * hv)
        total += wj * 0.5 * np.einsum("de,nde->n", av, dv)
    return total


# --------------------------------------------------------------------------
# density proxy
# --------------------------------------------------------------------------


def density_diagnostic(paths, node: int, bandwidth="silverman", component: int = 0,
                       exact_pdf: Callable | None = None, n_grid: int = 201, x0=None) -> dict:
    """Gaussian KDE of one state component at ``node``.

    Reports the minimum density over the 5-95% quantile box, the maximum
    absolute second difference on the grid, the sup error against
    ``exact_pdf`` when given, and the fraction of mass within
    ``3 sqrt(t_n - t_0)`` of ``x0`` (the small-time concentration check).
    """
    if node <= 0:
        raise ValueError("node must be positive")
    col = paths.steps.tolist().index(node) if node in paths.steps else None
    if col is None:
        raise ShapeMismatch(f"node {node} is not stored")
    data = paths.X[:, col, component]
    std = float(data.std(ddof=1))
    if isinstance(bandwidth, str):
        if bandwidth != "silverman":
            raise BandwidthInvalid(f"unknown bandwidth rule {bandwidth!r}")
        bw = "silverman"
        if std == 0:
            raise BandwidthInvalid("zero sample spread")
    else:
        hval = float(bandwidth)
        if not np.isfinite(hval) or hval <= 0:
            raise BandwidthInvalid(f"bandwidth must be positive, got {bandwidth!r}")
        if std == 0:
            raise BandwidthInvalid("zero sample spread")
        bw = hval / std
    kde = gaussian_kde(data, bw_method=bw)
    h = float(np.sqrt(kde.covariance[0, 0]))
    lo, hi = data.min() - 3 * h, data.max() + 3 * h
    grid = np.linspace(lo, hi, n_grid)
    dens = kde(grid)
    q05, q95 = np.quantile(data, [0.05, 0.95])
    bulk = (grid >= q05) & (grid <= q95)
    sec = np.abs(np.diff(dens, 2))
    step = grid[1] - grid[0]
    t = float(paths.grid.nodes[node] - paths.grid.t0)
    if x0 is None:
        centre = float(paths.X[:, 0, component].mean())
    else:
        centre = float(np.broadcast_to(np.asarray(x0, float).reshape(-1), (paths.d,))[component])
    report = {
        "node": int(node),
        "component": int(component),
        "bandwidth": h,
        "grid": grid.tolist(),
        "density": dens.tolist(),
        "bulk_interval": [float(q05), float(q95)],
        "min_bulk_density": float(dens[bulk].min()) if bulk.any() else 0.0,
        "positive_on_bulk": bool(bulk.any() and dens[bulk].min() > 0),
        "max_second_difference": float(sec.max()),
        "max_second_derivative": float(sec.max() / step**2),
        "concentration_fraction": float(np.mean(np.abs(data - centre) <= 3 * np.sqrt(t))),
        "note": "smoothness is reported from a kernel estimate, not proved",
    }
    if exact_pdf is not None:
        report["sup_error"] = float(np.max(np.abs(dens - exact_pdf(grid))))
    return report
