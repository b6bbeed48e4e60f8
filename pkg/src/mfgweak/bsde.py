"""Least-squares Monte Carlo backward solver for the quadratic BSDE.

The backward pass regresses on features of the forward state at each node.
Conditional expectations are estimated with a control variate built from
the previous node's fit: the martingale increment ``grad u_{n+1}(X_n)
sigma(X_n) . dW_n`` (optionally plus its second-order Itô term) is
subtracted from ``Y_{n+1}`` before regressing, and added back to ``Z_n``.
This removes most of the noise that dominates plain regression when
``dt`` is small, without changing the estimated conditional expectations.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFinite, RegressionSingular, ShapeMismatch
from .measure import LawFlow
from .model import LagrangianModel, as_terminal, optimal_control

MAX_CONDITION = 1e12


# --------------------------------------------------------------------------
# regression
# --------------------------------------------------------------------------


def _exponents(d: int, degree: int) -> np.ndarray:
    out = [e for total in range(degree + 1)
           for e in itertools.product(range(total + 1), repeat=d) if sum(e) == total]
    return np.array(out, dtype=int).reshape(-1, d)


@dataclass(frozen=True)
class RegressionBasis:
    """Feature family for conditional expectations.

    ``kind="polynomial"`` uses all monomials of total degree at most
    ``degree`` in standardised coordinates.  ``kind="kernel"`` uses an
    affine part plus Gaussian bumps of width ``bandwidth`` (in standardised
    units) centred at ``n_centers`` ensemble quantiles.  A ridge penalty
    ``ridge`` is applied to every coefficient except the intercept.
    """

    kind: str = "polynomial"
    degree: int = 2
    bandwidth: float = 0.5
    n_centers: int = 12
    ridge: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("polynomial", "kernel"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0 or self.ridge < 0 or self.bandwidth <= 0:
            raise ValueError("invalid basis parameters")

    def layout(self, X: np.ndarray) -> "FeatureMap":
        X = np.asarray(X, float)
        center = X.mean(axis=0)
        scale = X.std(axis=0)
        live = scale > 1e-12 * (1 + np.abs(center))
        scale = np.where(live, scale, 1.0)
        d = X.shape[1]
        if self.kind == "polynomial":
            exps = _exponents(d, self.degree)
            exps = exps[np.all((exps == 0) | live[None, :], axis=1)]
            return FeatureMap(center, scale, exps, None, self.bandwidth)
        exps = _exponents(d, 1)
        exps = exps[np.all((exps == 0) | live[None, :], axis=1)]
        if not live.any():
            return FeatureMap(center, scale, exps, None, self.bandwidth)
        U = (X - center) / scale
        order = np.argsort(U[:, 0], kind="stable")
        pick = order[np.linspace(0, len(U) - 1, self.n_centers + 2).astype(int)[1:-1]]
        return FeatureMap(center, scale, exps, U[pick] * live, self.bandwidth)

    def fit(self, X, targets, step: int = -1, weights=None, fmap: "FeatureMap | None" = None,
            design: np.ndarray | None = None) -> "FittedRegression":
        """Least-squares fit of ``targets`` (``(N,)`` or ``(N, k)``) on ``X``.

        A precomputed ``fmap``/``design`` pair for the same ``X`` may be passed
        to avoid rebuilding the features.
        """
        fmap = fmap or self.layout(X)
        A = fmap.features(X) if design is None else design
        T = np.asarray(targets, float)
        single = T.ndim == 1
        T = T.reshape(len(T), -1)
        # fit deviations from the first row so constant targets are reproduced exactly
        shift = T[0].copy()
        T = T - shift
        n = len(A)
        if weights is None:
            G = A.T @ A / n
            rhs = A.T @ T / n
        else:
            w = np.asarray(weights, float) / np.sum(weights)
            G = (A * w[:, None]).T @ A
            rhs = (A * w[:, None]).T @ T
        pen = np.full(G.shape[0], self.ridge)
        pen[0] = 0.0
        G = G + np.diag(pen)
        cond = np.linalg.cond(G)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise RegressionSingular(step, float(cond))
        coef = np.linalg.solve(G, rhs)
        resid = T - A @ coef
        coef[0] += shift
        rms = np.sqrt(np.mean(resid**2, axis=0))
        return FittedRegression(fmap, coef, rms, single, resid)


def _monomials(U: np.ndarray, exps: np.ndarray) -> np.ndarray:
    """``prod_j U[:, j] ** exps[k, j]`` for every row ``k`` of ``exps``."""
    top = int(exps.max()) if exps.size else 0
    pw = np.empty((top + 1,) + U.shape)
    pw[0] = 1.0
    for k in range(1, top + 1):
        pw[k] = pw[k - 1] * U
    out = np.ones((len(U), len(exps)))
    for j in range(U.shape[1]):
        out *= pw[exps[:, j], :, j].T
    return out


@dataclass
class FeatureMap:
    center: np.ndarray
    scale: np.ndarray
    exps: np.ndarray
    centers: np.ndarray | None
    bandwidth: float

    @property
    def size(self) -> int:
        return len(self.exps) + (0 if self.centers is None else len(self.centers))

    def _u(self, X):
        return (np.asarray(X, float) - self.center) / self.scale

    def features(self, X) -> np.ndarray:
        U = self._u(X)
        cols = [_monomials(U, self.exps)]
        if self.centers is not None:
            cols.append(self._bumps(U))
        return np.concatenate(cols, axis=1)

    def _bumps(self, U):
        diff = U[:, None, :] - self.centers[None]
        return np.exp(-np.sum(diff**2, axis=2) / (2 * self.bandwidth**2))

    def grad(self, X) -> np.ndarray:
        """Feature gradients in original coordinates, shape ``(N, p, d)``."""
        U = self._u(X)
        n, d = U.shape
        out = []
        for j in range(d):
            e = self.exps.copy()
            c = e[:, j].astype(float)
            e[:, j] = np.maximum(e[:, j] - 1, 0)
            out.append(c[None] * _monomials(U, e) / self.scale[j])
        g = np.stack(out, axis=2)
        if self.centers is not None:
            B = self._bumps(U)
            diff = U[:, None, :] - self.centers[None]
            gb = -B[:, :, None] * diff / self.bandwidth**2 / self.scale[None, None, :]
            g = np.concatenate([g, gb], axis=1)
        return g

    def hess(self, X) -> np.ndarray:
        """Feature Hessians, shape ``(N, p, d, d)``."""
        U = self._u(X)
        n, d = U.shape
        p = len(self.exps)
        H = np.zeros((n, p, d, d))
        for j in range(d):
            for k in range(d):
                e = self.exps.copy()
                c = e[:, j].astype(float)
                e[:, j] = np.maximum(e[:, j] - 1, 0)
                c = c * e[:, k]
                e[:, k] = np.maximum(e[:, k] - 1, 0)
                H[:, :, j, k] = c[None] * _monomials(U, e) / (self.scale[j] * self.scale[k])
        if self.centers is not None:
            B = self._bumps(U)
            diff = (U[:, None, :] - self.centers[None]) / self.bandwidth**2
            s = self.scale
            hb = B[:, :, None, None] * (diff[:, :, :, None] * diff[:, :, None, :]
                                         - np.eye(d)[None, None] / self.bandwidth**2)
            hb = hb / (s[None, None, :, None] * s[None, None, None, :])
            H = np.concatenate([H, hb], axis=1)
        return H


@dataclass
class FittedRegression:
    fmap: FeatureMap
    coef: np.ndarray          # (p, k)
    residual_rms: np.ndarray  # (k,)
    single: bool = True
    residuals: np.ndarray | None = field(default=None, repr=False)

    def predict(self, X) -> np.ndarray:
        out = self.fmap.features(X) @ self.coef
        return out[:, 0] if self.single else out

    def gradient(self, X) -> np.ndarray:
        """``(N, d)`` for a scalar fit, else ``(N, k, d)``."""
        g = np.einsum("npd,pk->nkd", self.fmap.grad(X), self.coef)
        return g[:, 0] if self.single else g

    def hessian(self, X) -> np.ndarray:
        h = np.einsum("npde,pk->nkde", self.fmap.hess(X), self.coef)
        return h[:, 0] if self.single else h


# --------------------------------------------------------------------------
# backward solver
# --------------------------------------------------------------------------


@dataclass
class BsdeSolution:
    """Backward solution on a path ensemble.

    ``Y`` is ``(N_p, N+1)``, ``Z`` and ``alpha`` are ``(N_p, N, m)``.
    ``y_residuals[n]`` and ``z_residuals[n]`` are the rms regression
    residuals at node ``n``.
    """

    Y: np.ndarray
    Z: np.ndarray
    alpha: np.ndarray
    y_residuals: np.ndarray
    z_residuals: np.ndarray
    terminal: np.ndarray
    truncation_radius: np.ndarray | None = None
    truncation_events: np.ndarray | None = None
    control_variate: str = "first"
    notes: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.Z.shape[1]

    def to_csv(self, path) -> None:
        n_p, n1 = self.Y.shape
        m = self.Z.shape[2]
        with open(path, "w") as fh:
            fh.write(",".join(["particle", "step", "Y"] + [f"z{k}" for k in range(m)]) + "\n")
            for i in range(n_p):
                for n in range(n1):
                    z = self.Z[i, n] if n < n1 - 1 else np.full(m, np.nan)
                    fh.write(f"{i},{n},{float(self.Y[i, n])!r}," + ",".join(repr(float(v)) for v in z) + "\n")

    def diagnostics(self) -> dict:
        out = {
            "control_variate": self.control_variate,
            "y_residuals": self.y_residuals.tolist(),
            "z_residuals": self.z_residuals.tolist(),
            "truncation_active": self.truncation_radius is not None,
            "notes": list(self.notes),
        }
        if self.truncation_radius is not None:
            out["truncation_radius"] = self.truncation_radius.tolist()
            out["truncation_events"] = self.truncation_events.tolist()
        return out

    def diagnostics_json(self, path, extra: dict | None = None) -> None:
        data = self.diagnostics()
        if extra:
            data.update(extra)
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2)


def truncation_radii(R0: float, N: int) -> np.ndarray:
    """``R_n = R0 sqrt(log(1 + N - n))`` for ``n = 0..N-1``."""
    n = np.arange(N)
    return R0 * np.sqrt(np.log1p(N - n))


def solve_backward(paths, model: LagrangianModel | None, flow: LawFlow, g, basis: RegressionBasis | None = None,
                   vfs=None, control_variate: str = "first", truncation: float | None = None,
                   alpha0=None, newton_tol: float = 1e-10) -> BsdeSolution:
    """Explicit backward LSMC scheme on a frozen law flow.

    ``Y_N = g(X_N, mu_N)``; for ``n = N-1 .. 0``::

        Z_n = E[Y_{n+1} dW_n / dt | X_n]
        Y_n = E[Y_{n+1} | X_n] + F(X_n, Z_n, mu_n) dt

    with ``F(x, z, mu) = L(x, a*(x, z, mu), mu)``, or ``F = 0`` when ``model``
    is ``None`` (the stored controls are then zero).  ``vfs`` (the diffusion
    fields) is needed for the control variate; ``control_variate`` is one
    of ``"none"``, ``"first"``, ``"second"``.  ``truncation=R0`` clips
    ``|Z_n|`` to ``R0 sqrt(log(1 + N - n))``.  When the unclipped pass
    produces non-finite values the solve is retried once with ``R0 = 10``.
    """
    try:
        return _solve_backward(paths, model, flow, g, basis, vfs, control_variate, truncation,
                               alpha0, newton_tol)
    except NonFinite:
        if truncation is not None:
            raise
        warnings.warn("non-finite backward pass; retrying with Z truncation R0=10", RuntimeWarning)
        sol = _solve_backward(paths, model, flow, g, basis, vfs, control_variate, 10.0,
                              alpha0, newton_tol)
        sol.notes.append("truncation switched on after a non-finite pass")
        return sol


def _solve_backward(paths, model, flow, g, basis, vfs, control_variate, truncation, alpha0, newton_tol):
    basis = basis or RegressionBasis()
    if control_variate not in ("none", "first", "second"):
        raise ValueError(f"unknown control variate {control_variate!r}")
    if control_variate != "none" and vfs is None:
        raise ValueError("the control variate needs the diffusion fields (vfs)")
    if paths.dW is None or not paths.full:
        raise ShapeMismatch("solve_backward needs a full ensemble with stored increments")
    X, dW = paths.X, paths.dW
    n_p, N, m = dW.shape
    if len(flow) != N + 1:
        raise ShapeMismatch(f"flow has {len(flow)} nodes, grid has {N + 1}")
    dt = paths.grid.dt
    g = as_terminal(g)

    Y = np.empty((n_p, N + 1))
    Z = np.empty((n_p, N, m))
    alpha = np.empty((n_p, N, m))
    y_res = np.zeros(N + 1)
    z_res = np.zeros(N)
    radii = truncation_radii(truncation, N) if truncation is not None else None
    events = np.zeros(N, dtype=int) if truncation is not None else None

    Y[:, N] = g.value(X[:, N], flow[N])
    terminal = Y[:, N].copy()
    _finite(Y[:, N], N, "terminal value")
    for n in range(N - 1, -1, -1):
        x, inc, y_next = X[:, n], dW[:, n], Y[:, n + 1]
        target = y_next
        c = np.zeros((n_p, m))
        if control_variate != "none":
            fit_next = basis.fit(X[:, n + 1], y_next, n + 1)
            s = vfs.sigma(x)
            c = np.einsum("nd,ndm->nm", fit_next.gradient(x), s)
            target = y_next - np.sum(c * inc, axis=1)
            if control_variate == "second":
                c2 = np.einsum("ndm,nde,nek->nmk", s, fit_next.hessian(x), s)
                quad = np.einsum("nm,nmk,nk->n", inc, c2, inc) - dt * np.trace(c2, axis1=1, axis2=2)
                target = target - 0.5 * quad
        fmap = basis.layout(x)
        A = fmap.features(x)
        fit_y = basis.fit(x, target, n, fmap=fmap, design=A)
        y_hat = A @ fit_y.coef[:, 0]
        fit_z = basis.fit(x, (target - y_hat)[:, None] * inc / dt, n, fmap=fmap, design=A)
        z = c + A @ fit_z.coef
        if radii is not None:
            norm = np.linalg.norm(z, axis=1)
            over = norm > radii[n]
            events[n] = int(over.sum())
            z[over] *= (radii[n] / norm[over])[:, None]
        if model is None:
            a, F = np.zeros((n_p, m)), 0.0
        else:
            a0 = None if alpha0 is None else alpha0[:, n]
            a = optimal_control(model, x, z, flow[n], newton_tol, a0=a0)
            F = model.L(x, a, flow[n])
        Y[:, n] = y_hat + F * dt
        Z[:, n] = z
        alpha[:, n] = a
        y_res[n] = float(fit_y.residual_rms[0])
        z_res[n] = float(np.sqrt(np.sum(fit_z.residual_rms**2)))
        _finite(Y[:, n], n, "Y")
        _finite(Z[:, n].reshape(n_p, -1), n, "Z")
    return BsdeSolution(Y, Z, alpha, y_res, z_res, terminal, radii, events, control_variate)


def _finite(v, step, what):
    v = v.reshape(len(v), -1)
    bad = ~np.all(np.isfinite(v), axis=1)
    if bad.any():
        raise NonFinite(int(np.flatnonzero(bad)[0]), step, what)


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------


def bmo_estimate(sol: BsdeSolution, paths, basis: RegressionBasis | None = None) -> float:
    """``max_n max_i E[sum_{k >= n} |Z_k|^2 dt | X_n]`` estimated by regression."""
    basis = basis or RegressionBasis()
    dt = paths.grid.dt
    sq = np.sum(sol.Z**2, axis=2) * dt
    tail = np.cumsum(sq[:, ::-1], axis=1)[:, ::-1]
    best = 0.0
    for n in range(sol.n_steps):
        if np.all(tail[:, n] == tail[0, n]):
            val = float(tail[0, n])
        else:
            val = float(basis.fit(paths.X[:, n], tail[:, n], n).predict(paths.X[:, n]).max())
        best = max(best, val)
    return best


def picard_residual(solA: BsdeSolution, solB: BsdeSolution) -> float:
    """``sup_n rms(Y_A - Y_B) + sup_n rms|Z_A - Z_B|``."""
    if solA.Y.shape != solB.Y.shape or solA.Z.shape != solB.Z.shape:
        raise ShapeMismatch(f"{solA.Y.shape}/{solA.Z.shape} vs {solB.Y.shape}/{solB.Z.shape}")
    ry = np.sqrt(np.mean((solA.Y - solB.Y) ** 2, axis=0)).max()
    rz = np.sqrt(np.mean(np.sum((solA.Z - solB.Z) ** 2, axis=2), axis=0)).max()
    return float(ry + rz)
