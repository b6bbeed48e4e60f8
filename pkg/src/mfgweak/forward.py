"""Forward SDE machinery: ensembles, tangent flows, Malliavin derivatives, brackets.

Conventions: states ``x`` are ``(N, d)``; ``sigma(x)`` returns ``(N, d, m)``
with column ``l`` the field ``sigma_l``; ``jac(x)`` returns ``(N, d, d, m)``
with ``jac[n, i, j, l] = d_j sigma_l^i``.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import DepthUnsupported, NonFinite, ShapeMismatch, SingularFlow
from .rng import BLOCK, particle_normals

CHUNK = 8 * BLOCK
REFRESH_EVERY = 16
MAX_CONDITION = 1e12
MAX_BRACKET_DEPTH = 4
BRACKET_FD_STEP = 1e-4


# --------------------------------------------------------------------------
# vector fields
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VectorFieldSet:
    """Diffusion fields ``sigma_1..sigma_m`` on ``R^d`` and an optional drift.

    ``drift``/``drift_jac`` default to zero.  ``hess`` (shape
    ``(N, d, d, d, m)``, ``hess[n, i, j, k, l] = d_j d_k sigma_l^i``) is only
    needed for brackets of depth two or more and for the Jacobian of the
    Itô correction.
    """

    d: int
    m: int
    sigma: Callable
    jac: Callable
    hess: Callable | None = None
    drift: Callable | None = None
    drift_jac: Callable | None = None
    name: str = "custom"
    jac_bound: float = np.inf

    def b(self, x):
        return np.zeros_like(x) if self.drift is None else self.drift(x)

    def grad_b(self, x):
        if self.drift is None:
            return np.zeros((len(x), self.d, self.d))
        if self.drift_jac is None:
            return _fd_jacobian(self.drift, x)
        return self.drift_jac(x)

    def with_drift(self, drift, drift_jac=None, name=None):
        return replace(self, drift=drift, drift_jac=drift_jac, name=name or self.name)

    def with_ito_drift(self):
        """Copy whose drift is the Stratonovich-to-Itô correction of its fields."""
        def bj(x):
            if self.hess is None:
                return _fd_jacobian(lambda y: ito_drift(self, y), x)
            s, J, H = self.sigma(x), self.jac(x), self.hess(x)
            # d_k b^i = 1/2 sum_l sum_j (d_k s_l^j d_j s_l^i + s_l^j d_k d_j s_l^i)
            return 0.5 * (np.einsum("njkl,nijl->nik", J, J) + np.einsum("njl,nijkl->nik", s, H))
        return replace(self, drift=lambda x: ito_drift(self, x), drift_jac=bj,
                       name=self.name + "+ito")


def _fd_jacobian(f, x, h=1e-6):
    x = np.asarray(x, float)
    d = x.shape[1]
    cols = []
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def constant_fields(matrix) -> VectorFieldSet:
    s = np.atleast_2d(np.asarray(matrix, float))
    d, m = s.shape
    return VectorFieldSet(
        d, m,
        sigma=lambda x: np.broadcast_to(s, (len(x), d, m)).copy(),
        jac=lambda x: np.zeros((len(x), d, d, m)),
        hess=lambda x: np.zeros((len(x), d, d, d, m)),
        name="constant", jac_bound=0.0,
    )


def linear_fields(scale: float = 1.0) -> VectorFieldSet:
    """``d = m = 1``, ``sigma(x) = scale * x``."""
    c = float(scale)
    return VectorFieldSet(
        1, 1,
        sigma=lambda x: (c * x)[:, :, None],
        jac=lambda x: np.full((len(x), 1, 1, 1), c),
        hess=lambda x: np.zeros((len(x), 1, 1, 1, 1)),
        name="linear", jac_bound=abs(c),
    )


def sine_fields() -> VectorFieldSet:
    """``d = m = 1``, ``sigma(x) = sin x``."""
    return VectorFieldSet(
        1, 1,
        sigma=lambda x: np.sin(x)[:, :, None],
        jac=lambda x: np.cos(x)[:, :, None, None],
        hess=lambda x: -np.sin(x)[:, :, None, None, None],
        name="sine", jac_bound=1.0,
    )


def heisenberg_fields() -> VectorFieldSet:
    """``sigma_1 = (1, 0)``, ``sigma_2 = (0, x_1)`` on ``R^2``."""
    def sigma(x):
        out = np.zeros((len(x), 2, 2))
        out[:, 0, 0] = 1.0
        out[:, 1, 1] = x[:, 0]
        return out

    def jac(x):
        out = np.zeros((len(x), 2, 2, 2))
        out[:, 1, 0, 1] = 1.0
        return out

    return VectorFieldSet(2, 2, sigma, jac, hess=lambda x: np.zeros((len(x), 2, 2, 2, 2)),
                          name="heisenberg", jac_bound=1.0)


def first_axis_fields(d: int = 2) -> VectorFieldSet:
    """Single constant field ``e_1`` on ``R^d``."""
    e = np.zeros((d, 1))
    e[0, 0] = 1.0
    return replace(constant_fields(e), name="first_axis")


def ito_drift(vfs: VectorFieldSet, x) -> np.ndarray:
    """``b^i(x) = 1/2 sum_l sum_j sigma_l^j(x) d_j sigma_l^i(x)``."""
    x = np.atleast_2d(np.asarray(x, float))
    return 0.5 * np.einsum("njl,nijl->ni", vfs.sigma(x), vfs.jac(x))


# --------------------------------------------------------------------------
# grids and ensembles
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    N: int

    def __post_init__(self):
        if not self.T > self.t0:
            raise ValueError("need t0 < T")
        if int(self.N) < 1:
            raise ValueError("need at least one step")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.N

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.N + 1)


@dataclass(frozen=True)
class GaussianLaw:
    """Initial law ``N(mean, std^2 I)``; draws come from the ``initial`` stream."""

    mean: float | np.ndarray = 0.0
    std: float = 1.0


def initial_states(initial, n_particles: int, d: int, seed: int, threads: int = 1) -> np.ndarray:
    if isinstance(initial, GaussianLaw):
        z = particle_normals(seed, "initial", n_particles, (d,), threads=threads)
        return np.asarray(initial.mean, float) + initial.std * z
    x = np.asarray(initial, float)
    if x.ndim <= 1:
        x = np.broadcast_to(x.reshape(1, -1) if x.ndim else np.full((1, d), float(x)), (n_particles, d))
        return x.copy()
    if x.shape != (n_particles, d):
        raise ShapeMismatch(f"initial states have shape {x.shape}, expected {(n_particles, d)}")
    return x.copy()


@dataclass
class PathEnsemble:
    """Particle paths with the increments that produced them.

    ``X`` has shape ``(N_p, n_stored, d)`` where the stored steps are
    ``steps``; ``dW`` is ``(N_p, N, m)`` or ``None`` when only terminal
    states were kept (the increments can always be regenerated from
    ``seed`` and ``stream``).
    """

    X: np.ndarray
    dW: np.ndarray | None
    grid: TimeGrid
    seed: int
    stream: str = "forward"
    steps: np.ndarray | None = None
    scheme: str = "euler"

    def __post_init__(self):
        if self.steps is None:
            self.steps = np.arange(self.X.shape[1])

    @property
    def n_particles(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[2]

    @property
    def full(self) -> bool:
        return self.X.shape[1] == self.grid.N + 1

    @property
    def terminal(self) -> np.ndarray:
        return self.X[:, -1]

    def to_csv(self, path) -> None:
        n_p, n_s, d = self.X.shape
        part = np.repeat(np.arange(n_p), n_s)
        step = np.tile(self.steps, n_p)
        cols = [f"x{k}" for k in range(d)]
        with open(path, "w") as fh:
            fh.write(",".join(["particle", "step"] + cols) + "\n")
            flat = self.X.reshape(-1, d)
            for p, s, row in zip(part, step, flat):
                fh.write(f"{p},{s}," + ",".join(repr(float(v)) for v in row) + "\n")

    def save(self, path) -> None:
        """Binary snapshot that :meth:`load` restores exactly."""
        np.savez(path, X=self.X, dW=self.dW if self.dW is not None else np.empty(0),
                 grid=np.array([self.grid.t0, self.grid.T, self.grid.N], float),
                 seed=np.array(self.seed), steps=self.steps,
                 meta=np.array([self.stream, self.scheme]))

    @classmethod
    def load(cls, path) -> "PathEnsemble":
        with np.load(path, allow_pickle=False) as z:
            t0, T, N = z["grid"]
            dW = z["dW"]
            stream, scheme = (str(s) for s in z["meta"])
            return cls(z["X"], dW if dW.size else None, TimeGrid(float(t0), float(T), int(N)),
                       int(z["seed"]), stream, z["steps"], scheme)


def _check_finite(x, start, step):
    bad = ~np.all(np.isfinite(x), axis=1)
    if bad.any():
        raise NonFinite(start + int(np.flatnonzero(bad)[0]), step)


def simulate_forward(vfs: VectorFieldSet, initial, grid: TimeGrid, seed: int, n_particles: int,
                     store: str = "all", threads: int = 1, stream: str = "forward",
                     scheme: str = "euler") -> PathEnsemble:
    """Euler-Maruyama ``X_{n+1} = X_n + b(X_n) dt + sigma(X_n) dW_n``.

    Particles are processed in fixed chunks whose noise depends only on the
    particle index, so the output is bitwise identical for any ``threads``.
    ``store="terminal"`` keeps only the first and last nodes and drops the
    increments.  ``scheme="heun"`` selects the Stratonovich predictor-corrector.
    """
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    if store not in ("all", "terminal"):
        raise ValueError("store must be 'all' or 'terminal'")
    N, dt, d, m = grid.N, grid.dt, vfs.d, vfs.m
    x0 = initial_states(initial, n_particles, d, seed)
    keep_all = store == "all"
    X = np.empty((n_particles, N + 1 if keep_all else 2, d))
    dW_all = np.empty((n_particles, N, m)) if keep_all else None
    sq = np.sqrt(dt)

    def work(start):
        stop = min(start + CHUNK, n_particles)
        dW = sq * particle_normals(seed, stream, stop - start, (N, m), start=start)
        x = x0[start:stop].copy()
        if keep_all:
            X[start:stop, 0] = x
            dW_all[start:stop] = dW
        else:
            X[start:stop, 0] = x
        for n in range(N):
            inc = dW[:, n]
            s = vfs.sigma(x)
            diff = np.einsum("nij,nj->ni", s, inc)
            if scheme == "euler":
                x = x + vfs.b(x) * dt + diff
            else:
                b0 = vfs.b(x)
                xp = x + b0 * dt + diff
                x = x + 0.5 * (b0 + vfs.b(xp)) * dt + 0.5 * (diff + np.einsum("nij,nj->ni", vfs.sigma(xp), inc))
            _check_finite(x, start, n + 1)
            if keep_all:
                X[start:stop, n + 1] = x
        if not keep_all:
            X[start:stop, 1] = x

    starts = list(range(0, n_particles, CHUNK))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, starts))
    else:
        for s0 in starts:
            work(s0)
    steps = np.arange(N + 1) if keep_all else np.array([0, N])
    return PathEnsemble(X, dW_all, grid, seed, stream, steps, scheme)


def heun_stratonovich(vfs: VectorFieldSet, initial, grid: TimeGrid, seed: int, n_particles: int,
                      store: str = "all", threads: int = 1, stream: str = "forward") -> PathEnsemble:
    """Heun scheme for ``dX = b dt + sigma(X) o dW`` (Stratonovich).

    Predictor ``X~ = X + b dt + sigma(X) dW``, corrector
    ``X+ = X + (b(X) + b(X~)) dt / 2 + (sigma(X) + sigma(X~)) dW / 2``.
    """
    return simulate_forward(vfs, initial, grid, seed, n_particles, store, threads, stream, "heun")


def replay(vfs: VectorFieldSet, x_start, dW, dt, scheme="euler") -> np.ndarray:
    """Re-run the scheme from ``x_start`` over increments ``dW`` (``(N_p, k, m)``).

    Returns all ``k + 1`` states, shape ``(N_p, k + 1, d)``.
    """
    x = np.array(x_start, float)
    out = np.empty((len(x), dW.shape[1] + 1, x.shape[1]))
    out[:, 0] = x
    for n in range(dW.shape[1]):
        inc = dW[:, n]
        diff = np.einsum("nij,nj->ni", vfs.sigma(x), inc)
        if scheme == "euler":
            x = x + vfs.b(x) * dt + diff
        else:
            b0 = vfs.b(x)
            xp = x + b0 * dt + diff
            x = x + 0.5 * (b0 + vfs.b(xp)) * dt + 0.5 * (diff + np.einsum("nij,nj->ni", vfs.sigma(xp), inc))
        out[:, n + 1] = x
    return out


# --------------------------------------------------------------------------
# tangent flow and Malliavin derivative
# --------------------------------------------------------------------------


@dataclass
class TangentFlow:
    """``J[i, n] = grad_x X`` at node ``n`` and its inverse, shape ``(N_p, N+1, d, d)``."""

    J: np.ndarray
    Jinv: np.ndarray
    max_condition: float
    max_inverse_error: float
    condition: np.ndarray = field(repr=False, default=None)


def step_factors(vfs: VectorFieldSet, x, dW, dt) -> np.ndarray:
    """``A_n = grad b(X_n) dt + sum_l grad sigma_l(X_n) dW_n^l``, shape ``(N_p, d, d)``."""
    return vfs.grad_b(x) * dt + np.einsum("nijl,nl->nij", vfs.jac(x), dW)


def tangent_flow(vfs: VectorFieldSet, paths: PathEnsemble) -> TangentFlow:
    """First variation of the Euler scheme along stored paths.

    ``J_{n+1} = (I + A_n) J_n``; the inverse is propagated by
    ``Jinv_{n+1} = Jinv_n (I + A_n)^{-1}`` and recomputed by direct inversion
    every :data:`REFRESH_EVERY` steps.
    """
    if paths.dW is None or not paths.full:
        raise ShapeMismatch("tangent_flow needs a full ensemble with stored increments")
    n_p, N, d = paths.n_particles, paths.grid.N, paths.d
    dt = paths.grid.dt
    eye = np.eye(d)
    J = np.empty((n_p, N + 1, d, d))
    Jinv = np.empty_like(J)
    cond = np.ones((n_p, N + 1))
    J[:, 0] = eye
    Jinv[:, 0] = eye
    worst_err = 0.0
    for n in range(N):
        F = eye + step_factors(vfs, paths.X[:, n], paths.dW[:, n], dt)
        J[:, n + 1] = F @ J[:, n]
        if (n + 1) % REFRESH_EVERY == 0 or n + 1 == N:
            with np.errstate(all="ignore"):
                Jinv[:, n + 1] = np.linalg.inv(J[:, n + 1])
            c = np.linalg.norm(J[:, n + 1], 2, axis=(1, 2)) * np.linalg.norm(Jinv[:, n + 1], 2, axis=(1, 2))
            cond[:, n + 1] = c
            bad = ~np.isfinite(c) | (c > MAX_CONDITION)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise SingularFlow(i, n + 1, float(c[i]))
        else:
            with np.errstate(all="ignore"):
                Jinv[:, n + 1] = Jinv[:, n] @ np.linalg.inv(F)
            cond[:, n + 1] = cond[:, n]
        if not np.all(np.isfinite(Jinv[:, n + 1])):
            i = int(np.flatnonzero(~np.all(np.isfinite(Jinv[:, n + 1]), axis=(1, 2)))[0])
            raise SingularFlow(i, n + 1, np.inf)
        err = np.abs(J[:, n + 1] @ Jinv[:, n + 1] - eye).max()
        worst_err = max(worst_err, float(err))
    return TangentFlow(J, Jinv, float(cond.max()), worst_err, cond)


def malliavin_derivative(tf: TangentFlow, vfs: VectorFieldSet, paths: PathEnsemble,
                         u_step: int, t_step: int) -> np.ndarray:
    """``D_u X_t = J_t Jinv_u sigma(X_u)`` per particle, shape ``(N_p, d, m)``.

    Zero when ``t_step < u_step``.
    """
    n_p = paths.n_particles
    if t_step < u_step:
        return np.zeros((n_p, vfs.d, vfs.m))
    return tf.J[:, t_step] @ tf.Jinv[:, u_step] @ vfs.sigma(paths.X[:, u_step])


def noise_bump(vfs: VectorFieldSet, paths: PathEnsemble, u_step: int, h: float = 1e-4,
               component: int = 0) -> np.ndarray:
    """States after bumping the increment ``dW[u_step]`` by ``h e_component``.

    Returns ``(X_bumped - X) / h`` for nodes ``u_step .. N`` (shape
    ``(N_p, N - u_step + 1, d)``); the first entry is zero because the
    bumped increment acts on the step leaving ``u_step``.
    """
    if paths.dW is None:
        raise ShapeMismatch("noise_bump needs stored increments")
    dW = paths.dW[:, u_step:].copy()
    dW[:, 0, component] += h
    bumped = replay(vfs, paths.X[:, u_step], dW, paths.grid.dt, paths.scheme)
    return (bumped - paths.X[:, u_step:]) / h


# --------------------------------------------------------------------------
# brackets
# --------------------------------------------------------------------------


@dataclass
class HormanderReport:
    rank: int
    depth: int
    labels: list
    vectors: np.ndarray
    singular_values: np.ndarray

    def to_dict(self):
        return {"rank": self.rank, "depth": self.depth, "labels": self.labels,
                "vectors": self.vectors.tolist(), "singular_values": self.singular_values.tolist()}


def _field(vfs, l):
    return lambda y: vfs.sigma(y[None])[0, :, l]


def _field_jac(vfs, l):
    return lambda y: vfs.jac(y[None])[0, :, :, l]


def _num_jac(f, y, h=BRACKET_FD_STEP):
    cols = []
    for k in range(len(y)):
        e = np.zeros(len(y))
        e[k] = h
        cols.append((f(y + e) - f(y - e)) / (2 * h))
    return np.stack(cols, axis=1)


def _bracket(X, JX, Y, JY):
    """``[X, Y]^i = sum_j X^j d_j Y^i - Y^j d_j X^i`` as a callable."""
    return lambda y: JY(y) @ X(y) - JX(y) @ Y(y)


def hormander_rank(vfs: VectorFieldSet, x, depth: int, rel_tol: float = 1e-8):
    """Rank of the span of the fields and their iterated brackets at ``x``.

    Depth 0 uses the fields only; depth ``k`` adds brackets
    ``[sigma_l, V]`` for every ``V`` of depth ``k - 1``.  Depth-one brackets
    use the analytic Jacobians; deeper ones differentiate the lower-level
    brackets by central differences.  Returns ``(rank, report)``.
    """
    depth = int(depth)
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if depth > MAX_BRACKET_DEPTH:
        raise DepthUnsupported(f"bracket depth {depth} exceeds {MAX_BRACKET_DEPTH}")
    if depth >= 2 and vfs.hess is None:
        raise DepthUnsupported("brackets of depth >= 2 need second derivatives of the fields")
    x = np.asarray(x, float).reshape(vfs.d)
    base = [(f"s{l + 1}", _field(vfs, l), _field_jac(vfs, l)) for l in range(vfs.m)]
    level = base
    everything = list(base)
    for k in range(1, depth + 1):
        nxt = []
        for (i, (ln, F, JF)), (j, (vn, V, JV)) in itertools.product(enumerate(base), enumerate(level)):
            if k == 1 and j <= i:
                continue  # [s_i, s_j] for i < j only
            br = _bracket(F, JF, V, JV)
            nxt.append((f"[{ln},{vn}]", br, (lambda g: (lambda y: _num_jac(g, y)))(br)))
        level = nxt
        everything.extend(nxt)
    vecs = np.array([f(x) for _, f, _ in everything])
    sv = np.linalg.svd(vecs, compute_uv=False) if vecs.size else np.zeros(0)
    smax = sv.max() if sv.size else 0.0
    rank = int(np.sum(sv > rel_tol * smax)) if smax > 0 else 0
    return rank, HormanderReport(rank, depth, [n for n, _, _ in everything], vecs, sv)
