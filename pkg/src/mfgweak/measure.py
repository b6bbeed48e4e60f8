"""Empirical measures, 2-Wasserstein distances and particle Lions derivatives."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import ndtri
from scipy.stats import qmc

from .errors import EvaluatorFailure, ModeUnsupported, ShapeMismatch

EXACT_MAX = 512


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted point cloud in R^d.

    ``points`` has shape ``(N, d)``; ``weights`` are renormalised to sum to
    one on construction.
    """

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if pts.shape[0] != w.shape[0]:
            raise ShapeMismatch(f"{pts.shape[0]} points but {w.shape[0]} weights")
        if pts.shape[0] == 0:
            raise ValueError("empty measure")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        total = w.sum()
        if total <= 0:
            raise ValueError("weights sum to zero")
        w = w / total
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "EmpiricalMeasure":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    @classmethod
    def dirac(cls, x) -> "EmpiricalMeasure":
        return cls.uniform(np.atleast_2d(np.asarray(x, dtype=float)))

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.size, rtol=0, atol=1e-15))

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def second_moment(self) -> float:
        return float(self.weights @ np.sum(self.points**2, axis=1))

    def std(self) -> np.ndarray:
        m = self.mean()
        return np.sqrt(np.maximum(self.weights @ (self.points - m) ** 2, 0.0))

    def shifted(self, i: int, delta) -> "EmpiricalMeasure":
        """Copy with particle ``i`` moved by ``delta``."""
        pts = self.points.copy()
        pts[i] += delta
        return EmpiricalMeasure(pts, self.weights)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["weight"] + [f"x{k}" for k in range(self.dim)])
            for w, row in zip(self.weights, self.points):
                writer.writerow([repr(float(w))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "EmpiricalMeasure":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 1:], data[:, 0])


@dataclass
class LawFlow:
    """One empirical measure per time-grid node."""

    measures: list[EmpiricalMeasure] = field(default_factory=list)

    def __post_init__(self):
        dims = {m.dim for m in self.measures}
        if len(dims) > 1:
            raise ShapeMismatch(f"inconsistent dimensions across nodes: {sorted(dims)}")

    def __len__(self):
        return len(self.measures)

    def __getitem__(self, n) -> EmpiricalMeasure:
        return self.measures[n]

    def __iter__(self):
        return iter(self.measures)

    @property
    def dim(self) -> int:
        return self.measures[0].dim

    @classmethod
    def from_states(cls, X: np.ndarray, weights: np.ndarray | None = None) -> "LawFlow":
        """Build a flow from states of shape ``(N_p, n_nodes, d)``.

        ``weights`` has shape ``(N_p, n_nodes)`` when given.
        """
        n_p, n_nodes = X.shape[:2]
        if weights is None:
            w = np.full(n_p, 1.0 / n_p)
            return cls([EmpiricalMeasure(X[:, n], w) for n in range(n_nodes)])
        return cls([EmpiricalMeasure(X[:, n], weights[:, n]) for n in range(n_nodes)])

    @classmethod
    def constant(cls, measure: EmpiricalMeasure, n_nodes: int) -> "LawFlow":
        return cls([measure] * n_nodes)

    def save(self, directory) -> list[str]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for n, m in enumerate(self.measures):
            name = f"flow_{n:05d}.csv"
            m.to_csv(directory / name)
            names.append(name)
        manifest = {"nodes": len(self.measures), "dim": self.dim, "files": names}
        (directory / "flow_manifest.json").write_text(json.dumps(manifest, indent=2))
        return names + ["flow_manifest.json"]

    @classmethod
    def load(cls, directory) -> "LawFlow":
        directory = Path(directory)
        manifest = json.loads((directory / "flow_manifest.json").read_text())
        return cls([EmpiricalMeasure.from_csv(directory / f) for f in manifest["files"]])


class ApproxDistance(float):
    """A float flagged as an approximation (sliced W2)."""

    approximate = True


def _w2sq_1d(x, wx, y, wy) -> float:
    ix = np.argsort(x, kind="stable")
    iy = np.argsort(y, kind="stable")
    x, wx, y, wy = x[ix], wx[ix], y[iy], wy[iy]
    if x.size == y.size and np.all(wx == wx[0]) and np.all(wy == wy[0]):
        return float(np.mean((x - y) ** 2))
    cx = np.cumsum(wx)
    cy = np.cumsum(wy)
    cx[-1] = cy[-1] = 1.0
    t = np.union1d(cx, cy)
    t_prev = np.concatenate(([0.0], t[:-1]))
    mass = t - t_prev
    mid = 0.5 * (t + t_prev)
    jx = np.minimum(np.searchsorted(cx, mid), x.size - 1)
    jy = np.minimum(np.searchsorted(cy, mid), y.size - 1)
    return float(np.sum(mass * (x[jx] - y[jy]) ** 2))


def assignment_w2sq(x: np.ndarray, y: np.ndarray) -> float:
    """Squared W2 between equal-size uniform clouds by optimal assignment."""
    x = np.asarray(x, dtype=float).reshape(len(x), -1)
    y = np.asarray(y, dtype=float).reshape(len(y), -1)
    cost = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def sliced_directions(d: int, n: int = 64) -> np.ndarray:
    """Fixed quasi-random unit directions (Halton points pushed to the sphere)."""
    u = qmc.Halton(d=d, scramble=False).random(n + 1)[1:]
    g = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure, mode: str = "exact",
                 n_directions: int = 64) -> float:
    """2-Wasserstein distance between two empirical measures.

    In one dimension the quantile coupling is exact for arbitrary weights.
    In higher dimension ``mode="exact"`` solves the assignment problem and
    needs equal-size uniform clouds of at most 512 points; ``mode="sliced"``
    averages squared 1-d distances over fixed directions and returns an
    :class:`ApproxDistance`.
    """
    if mu.dim != nu.dim:
        raise ShapeMismatch(f"dimension {mu.dim} vs {nu.dim}")
    if mu.dim == 1:
        return float(np.sqrt(_w2sq_1d(mu.points[:, 0], mu.weights, nu.points[:, 0], nu.weights)))
    if mode == "exact":
        if mu.size != nu.size or not (mu.is_uniform and nu.is_uniform):
            raise ModeUnsupported(max(mu.size, nu.size), mu.dim,
                                  "exact W2 in d>1 needs equal-size uniform measures")
        if mu.size > EXACT_MAX:
            raise ModeUnsupported(mu.size, mu.dim)
        return float(np.sqrt(assignment_w2sq(mu.points, nu.points)))
    if mode == "sliced":
        dirs = sliced_directions(mu.dim, n_directions)
        px = mu.points @ dirs.T
        py = nu.points @ dirs.T
        total = sum(_w2sq_1d(px[:, k], mu.weights, py[:, k], nu.weights) for k in range(len(dirs)))
        return ApproxDistance(np.sqrt(total / len(dirs)))
    raise ValueError(f"unknown mode {mode!r}")


def subsample(measure: EmpiricalMeasure, n: int, seed: int = 0) -> EmpiricalMeasure:
    """Uniform subsample without replacement (fixed seed) for exact W2."""
    if measure.size <= n:
        return measure
    from .rng import generator

    idx = np.sort(generator(seed, "subsample-w2").choice(measure.size, n, replace=False))
    return EmpiricalMeasure(measure.points[idx], measure.weights[idx])


def coupling_bound_check(X, Xp, slack: float = 1e-9):
    """Check W2(L(X), L(X'))^2 <= E|X - X'|^2 on index-paired samples.

    Returns ``(w2sq, mse, ok)``.
    """
    X = np.asarray(X, dtype=float)
    Xp = np.asarray(Xp, dtype=float)
    if X.shape != Xp.shape:
        raise ShapeMismatch(f"{X.shape} vs {Xp.shape}")
    X = X.reshape(len(X), -1)
    Xp = Xp.reshape(len(Xp), -1)
    mse = float(np.mean(np.sum((X - Xp) ** 2, axis=1)))
    if X.shape[1] == 1:
        w2sq = _w2sq_1d(X[:, 0], np.full(len(X), 1 / len(X)), Xp[:, 0], np.full(len(X), 1 / len(X)))
    else:
        if len(X) > EXACT_MAX:
            raise ModeUnsupported(len(X), X.shape[1])
        w2sq = assignment_w2sq(X, Xp)
    return w2sq, mse, bool(w2sq <= mse + slack)


def default_lions_step(mu: EmpiricalMeasure) -> float:
    s = float(np.mean(mu.std()))
    if s <= 0:
        s = 1.0
    return 0.1 * s / np.sqrt(mu.size)


def lions_derivative(f: Callable[[EmpiricalMeasure], float], mu: EmpiricalMeasure, i: int,
                     h: float | None = None) -> np.ndarray:
    """Particle finite-difference proxy for the Lions derivative at ``x_i``.

    Moving particle ``i`` by ``+-h e_k`` and dividing by its weight recovers
    the lifted Frechet derivative evaluated at that particle.
    """
    if h is None:
        h = default_lions_step(mu)
    if h <= 0:
        raise ValueError("h must be positive")
    out = np.empty(mu.dim)
    scale = 1.0 / mu.weights[i]
    for k in range(mu.dim):
        e = np.zeros(mu.dim)
        e[k] = h
        fp = f(mu.shifted(i, e))
        fm = f(mu.shifted(i, -e))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluatorFailure((i, k))
        out[k] = scale * (fp - fm) / (2 * h)
    return out


@dataclass
class LipschitzReport:
    C: float
    pairs_checked: int
    blow_up: bool
    nearest_particle_substitutions: int = 0
    worst_pair: tuple | None = None


def lipschitz_probe_dmu(f, measures: Sequence[EmpiricalMeasure], tol: float = 1e-12,
                        declared_bound: float | None = None, n_probe: int = 8,
                        h: float | None = None) -> LipschitzReport:
    """Fit the smallest C with |d_mu f(mu,v) - d_mu f(mu',v')| <= C (W2 + |v - v'|).

    Evaluation points are restricted to particles; when ``mu'`` is a
    different size, ``v'`` is the nearest particle of ``mu'`` to ``v`` and
    the substitution is counted in the report.
    """
    if len(measures) < 2:
        raise ValueError("need at least two measures")
    cache: dict[tuple[int, int], np.ndarray] = {}

    def grad(k, i):
        key = (k, i)
        if key not in cache:
            cache[key] = lions_derivative(f, measures[k], i, h)
        return cache[key]

    probes = {k: np.unique(np.linspace(0, m.size - 1, min(n_probe, m.size)).astype(int))
              for k, m in enumerate(measures)}
    best, count, subs, worst = 0.0, 0, 0, None

    def consider(k, i, l, j, w2):
        nonlocal best, count, worst
        dv = float(np.linalg.norm(measures[k].points[i] - measures[l].points[j]))
        denom = w2 + dv
        if denom <= tol:
            return
        c = float(np.linalg.norm(grad(k, i) - grad(l, j))) / denom
        count += 1
        if c > best:
            best, worst = c, (k, i, l, j)

    for k, m in enumerate(measures):
        for i, j in combinations(probes[k], 2):
            consider(k, i, k, j, 0.0)
    for k, l in combinations(range(len(measures)), 2):
        mk, ml = measures[k], measures[l]
        mode = "exact" if mk.dim == 1 or (mk.size == ml.size and mk.size <= EXACT_MAX) else "sliced"
        w2 = wasserstein2(mk, ml, mode=mode)
        for i in probes[k]:
            if mk.size == ml.size:
                j = i
            else:
                j = int(np.argmin(np.sum((ml.points - mk.points[i]) ** 2, axis=1)))
                subs += 1
            consider(k, i, l, j, w2)
    blow = declared_bound is not None and best > 10 * declared_bound
    return LipschitzReport(best, count, bool(blow), subs, worst)
