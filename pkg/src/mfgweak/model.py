"""Lagrangian layer: running costs, the minimising control and the driver.

All evaluators are batched: ``x`` has shape ``(N, d)``, ``a`` and ``z`` have
shape ``(N, m)`` and a single :class:`~mfgweak.measure.EmpiricalMeasure` is
shared by the whole batch.  Scalar-per-sample results have shape ``(N,)``.
Derivatives with respect to the measure are evaluated at a batch of points
``v`` of shape ``(N, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import EvaluatorFailure, NonConvergence
from .measure import EmpiricalMeasure, wasserstein2

FD_STEP = 1e-4


def _rows(v, width):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    elif v.ndim == 1:
        v = v.reshape(1, width) if v.size == width else v.reshape(-1, width)
    return v


# --------------------------------------------------------------------------
# Lagrangians
# --------------------------------------------------------------------------


class LagrangianModel:
    """Running cost ``L(x, a, mu)`` with its derivatives.

    Subclasses must implement :meth:`L`, :meth:`grad_a`, :meth:`grad_x`,
    :meth:`hess_aa` and the measure derivatives when they depend on ``mu``.
    Mixed and higher derivatives fall back to central differences.
    """

    dim_state: int = 1
    dim_control: int = 1
    measure_dependent: bool = False
    analytic_third: bool = False
    name: str = "lagrangian"

    def __init__(self, C: float = 1.0, gamma: float = 1.0, eta: float = 0.1):
        self.constants = {"C": float(C), "gamma": float(gamma), "eta": float(eta)}

    # required ------------------------------------------------------------
    def L(self, x, a, mu):
        raise NotImplementedError

    def grad_a(self, x, a, mu):
        raise NotImplementedError

    def grad_x(self, x, a, mu):
        raise NotImplementedError

    def hess_aa(self, x, a, mu):
        raise NotImplementedError

    # measure derivatives (zero unless overridden) ------------------------
    def dmu(self, x, a, mu, v):
        return np.zeros((len(x), self.dim_state))

    def dmu_grad_a(self, x, a, mu, v):
        return np.zeros((len(x), self.dim_control, self.dim_state))

    def dmu_grad_x(self, x, a, mu, v):
        return np.zeros((len(x), self.dim_state, self.dim_state))

    def dmu_hess_aa(self, x, a, mu, v):
        return np.zeros((len(x), self.dim_control, self.dim_control, self.dim_state))

    # finite-difference fallbacks -----------------------------------------
    def hess_xa(self, x, a, mu):
        """Mixed Hessian with shape ``(N, m, d)``: entry ``[j, k] = d_xk d_aj L``."""
        out = np.empty((len(x), self.dim_control, self.dim_state))
        for k in range(self.dim_state):
            e = np.zeros(self.dim_state)
            e[k] = FD_STEP
            out[:, :, k] = (self.grad_a(x + e, a, mu) - self.grad_a(x - e, a, mu)) / (2 * FD_STEP)
        return out

    def hess_xx(self, x, a, mu):
        out = np.empty((len(x), self.dim_state, self.dim_state))
        for k in range(self.dim_state):
            e = np.zeros(self.dim_state)
            e[k] = FD_STEP
            out[:, :, k] = (self.grad_x(x + e, a, mu) - self.grad_x(x - e, a, mu)) / (2 * FD_STEP)
        return out

    def third_aaa_dir(self, x, a, mu, xi1, xi2, xi3):
        """Directional third derivative ``D3_aaa L[xi1, xi2, xi3]``."""
        hp = self.hess_aa(x, a + FD_STEP * xi1, mu)
        hm = self.hess_aa(x, a - FD_STEP * xi1, mu)
        d = (hp - hm) / (2 * FD_STEP)
        return np.einsum("nij,ni,nj->n", d, xi2, xi3)

    def third_xaa(self, x, a, mu):
        """Shape ``(N, d, m, m)``."""
        out = np.empty((len(x), self.dim_state, self.dim_control, self.dim_control))
        for k in range(self.dim_state):
            e = np.zeros(self.dim_state)
            e[k] = FD_STEP
            out[:, k] = (self.hess_aa(x + e, a, mu) - self.hess_aa(x - e, a, mu)) / (2 * FD_STEP)
        return out


class WeightFunction:
    """Positive weight ``f(x, mu)`` for :class:`QuadraticCostModel`."""

    measure_dependent = False
    f_min = 1.0
    f_max = 1.0

    def value(self, x, mu):
        raise NotImplementedError

    def grad_x(self, x, mu):
        return np.zeros_like(x)

    def hess_xx(self, x, mu):
        return np.zeros((len(x), x.shape[1], x.shape[1]))

    def dmu(self, x, mu, v):
        return np.zeros_like(x)

    def dmu_grad_x(self, x, mu, v):
        return np.zeros((len(x), x.shape[1], x.shape[1]))

    # bounds used to derive declared constants
    grad_bound = 0.0
    hess_bound = 0.0


class ConstantWeight(WeightFunction):
    def __init__(self, c: float = 1.0):
        if c <= 0:
            raise ValueError("weight must be positive")
        self.c = float(c)
        self.f_min = self.f_max = self.c

    def value(self, x, mu):
        return np.full(len(x), self.c)


class OscillatingWeight(WeightFunction):
    """``f(x, mu) = base + amp * sin(sum x) * cos(sum mean(mu))``.

    Smooth, bounded with bounded derivatives, and ``inf f = base - amp``.
    """

    measure_dependent = True

    def __init__(self, base: float = 1.5, amp: float = 0.5):
        if amp < 0 or base - amp <= 0:
            raise ValueError("need base > amp >= 0")
        self.base, self.amp = float(base), float(amp)
        self.f_min, self.f_max = base - amp, base + amp
        self.grad_bound = self.hess_bound = amp

    def _parts(self, x, mu):
        s = x.sum(axis=1)
        m = float(np.sum(mu.mean()))
        return s, m

    def value(self, x, mu):
        s, m = self._parts(x, mu)
        return self.base + self.amp * np.sin(s) * np.cos(m)

    def grad_x(self, x, mu):
        s, m = self._parts(x, mu)
        g = self.amp * np.cos(s) * np.cos(m)
        return np.repeat(g[:, None], x.shape[1], axis=1)

    def hess_xx(self, x, mu):
        s, m = self._parts(x, mu)
        h = -self.amp * np.sin(s) * np.cos(m)
        d = x.shape[1]
        return h[:, None, None] * np.ones((1, d, d))

    def dmu(self, x, mu, v):
        s, m = self._parts(x, mu)
        g = -self.amp * np.sin(s) * np.sin(m)
        return np.repeat(g[:, None], x.shape[1], axis=1)

    def dmu_grad_x(self, x, mu, v):
        s, m = self._parts(x, mu)
        h = -self.amp * np.cos(s) * np.sin(m)
        d = x.shape[1]
        return h[:, None, None] * np.ones((1, d, d))


class QuadraticPotential:
    """State potential ``V(x) = k |x|^2`` added to the running cost."""

    def __init__(self, k: float):
        self.k = float(k)

    def value(self, x, mu):
        return self.k * np.sum(x**2, axis=1)

    def grad_x(self, x, mu):
        return 2 * self.k * x

    def hess_xx(self, x, mu):
        d = x.shape[1]
        return np.broadcast_to(2 * self.k * np.eye(d), (len(x), d, d)).copy()


class QuadraticCostModel(LagrangianModel):
    """``L(x, a, mu) = f(x, mu) |a|^2 (+ V(x, mu))`` with ``inf f > 0``."""

    analytic_third = True

    def __init__(self, weight: WeightFunction | None = None, dim_state: int = 1,
                 dim_control: int = 1, potential=None, C: float | None = None,
                 gamma: float | None = None, eta: float | None = None):
        self.weight = weight or ConstantWeight(1.0)
        self.potential = potential
        self.dim_state = dim_state
        self.dim_control = dim_control
        self.measure_dependent = bool(self.weight.measure_dependent)
        self.name = "quadratic"
        w = self.weight
        if C is None:
            C = max(1.0, 2 * w.f_max, 4 * w.grad_bound, 2 * w.hess_bound) * 2
        if gamma is None:
            gamma = 2 * w.f_min
        if eta is None:
            eta = 1.0 / (4 * w.f_max)
        super().__init__(C=C, gamma=gamma, eta=eta)

    def L(self, x, a, mu):
        out = self.weight.value(x, mu) * np.sum(a**2, axis=1)
        if self.potential is not None:
            out = out + self.potential.value(x, mu)
        return out

    def grad_a(self, x, a, mu):
        return 2 * self.weight.value(x, mu)[:, None] * a

    def grad_x(self, x, a, mu):
        out = self.weight.grad_x(x, mu) * np.sum(a**2, axis=1)[:, None]
        if self.potential is not None:
            out = out + self.potential.grad_x(x, mu)
        return out

    def hess_aa(self, x, a, mu):
        f = self.weight.value(x, mu)
        return 2 * f[:, None, None] * np.eye(self.dim_control)[None]

    def hess_xa(self, x, a, mu):
        return 2 * np.einsum("nj,nk->njk", a, self.weight.grad_x(x, mu))

    def hess_xx(self, x, a, mu):
        out = self.weight.hess_xx(x, mu) * np.sum(a**2, axis=1)[:, None, None]
        if self.potential is not None:
            out = out + self.potential.hess_xx(x, mu)
        return out

    def third_aaa_dir(self, x, a, mu, xi1, xi2, xi3):
        return np.zeros(len(x))

    def third_xaa(self, x, a, mu):
        g = self.weight.grad_x(x, mu)
        return 2 * np.einsum("nk,ij->nkij", g, np.eye(self.dim_control))

    def dmu(self, x, a, mu, v):
        return self.weight.dmu(x, mu, v) * np.sum(a**2, axis=1)[:, None]

    def dmu_grad_a(self, x, a, mu, v):
        return 2 * np.einsum("nj,nk->njk", a, self.weight.dmu(x, mu, v))

    def dmu_grad_x(self, x, a, mu, v):
        return self.weight.dmu_grad_x(x, mu, v) * np.sum(a**2, axis=1)[:, None, None]

    def dmu_hess_aa(self, x, a, mu, v):
        g = self.weight.dmu(x, mu, v)
        return 2 * np.einsum("ij,nk->nijk", np.eye(self.dim_control), g)


class QuarticControlModel(LagrangianModel):
    """``L = |a|^4``: smooth and convex but with unbounded Hessian."""

    analytic_third = True

    def __init__(self, dim_state: int = 1, dim_control: int = 1, C: float = 10.0,
                 gamma: float = 0.1, eta: float = 0.01):
        self.dim_state = dim_state
        self.dim_control = dim_control
        self.name = "quartic"
        super().__init__(C=C, gamma=gamma, eta=eta)

    def L(self, x, a, mu):
        return np.sum(a**2, axis=1) ** 2

    def grad_a(self, x, a, mu):
        return 4 * np.sum(a**2, axis=1)[:, None] * a

    def grad_x(self, x, a, mu):
        return np.zeros((len(x), self.dim_state))

    def hess_aa(self, x, a, mu):
        r2 = np.sum(a**2, axis=1)
        return 4 * r2[:, None, None] * np.eye(self.dim_control)[None] + 8 * np.einsum("ni,nj->nij", a, a)

    def hess_xa(self, x, a, mu):
        return np.zeros((len(x), self.dim_control, self.dim_state))

    def hess_xx(self, x, a, mu):
        return np.zeros((len(x), self.dim_state, self.dim_state))

    def third_aaa_dir(self, x, a, mu, xi1, xi2, xi3):
        dot = lambda u, w: np.sum(u * w, axis=1)  # noqa: E731
        return 8 * (dot(a, xi1) * dot(xi2, xi3) + dot(a, xi2) * dot(xi1, xi3) + dot(a, xi3) * dot(xi1, xi2))

    def third_xaa(self, x, a, mu):
        return np.zeros((len(x), self.dim_state, self.dim_control, self.dim_control))


# --------------------------------------------------------------------------
# Minimiser, Hamiltonian and driver
# --------------------------------------------------------------------------


def optimal_control(model: LagrangianModel, x, z, mu: EmpiricalMeasure, tol: float = 1e-10,
                    max_iter: int = 100, a0=None) -> np.ndarray:
    """Solve ``grad_a L(x, a, mu) = z`` for every row by damped Newton.

    Steps are accepted by Armijo backtracking on ``|grad_a L - z|^2``; when
    the Newton direction fails to decrease the merit, a gradient step on
    the same merit is taken instead.  Returns an array with the shape of
    ``z`` (a single vector in, a single vector out).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    single = np.ndim(z) <= 1
    x = _rows(x, model.dim_state)
    z = _rows(z, model.dim_control)
    if len(x) == 1 and len(z) > 1:
        x = np.repeat(x, len(z), axis=0)
    a = np.zeros_like(z) if a0 is None else _rows(a0, model.dim_control).astype(float).copy()

    r = model.grad_a(x, a, mu) - z
    phi = np.sum(r**2, axis=1)
    it = 0
    for it in range(1, max_iter + 1):
        active = np.sqrt(phi) > tol
        if not active.any():
            break
        xa, aa, za, ra, pa = x[active], a[active], z[active], r[active], phi[active]
        H = model.hess_aa(xa, aa, mu)
        try:
            step = np.linalg.solve(H, ra[..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.einsum("nji,nj->ni", H, ra)
        t = np.ones(len(aa))
        accepted = np.zeros(len(aa), dtype=bool)
        new_a, new_r, new_phi = aa.copy(), ra.copy(), pa.copy()
        for _ in range(40):
            todo = ~accepted
            if not todo.any():
                break
            cand = aa[todo] - t[todo, None] * step[todo]
            rc = model.grad_a(xa[todo], cand, mu) - za[todo]
            pc = np.sum(rc**2, axis=1)
            ok = np.isfinite(pc) & (pc <= (1 - 1e-4 * t[todo]) * pa[todo])
            idx = np.flatnonzero(todo)[ok]
            new_a[idx], new_r[idx], new_phi[idx] = cand[ok], rc[ok], pc[ok]
            accepted[idx] = True
            t[todo] *= 0.5
        stuck = ~accepted
        if stuck.any():
            # gradient of 0.5|r|^2 is H^T r
            g = np.einsum("nji,nj->ni", H[stuck], ra[stuck])
            s = np.ones(stuck.sum())
            base = pa[stuck]
            for _ in range(60):
                cand = aa[stuck] - s[:, None] * g
                rc = model.grad_a(xa[stuck], cand, mu) - za[stuck]
                pc = np.sum(rc**2, axis=1)
                good = np.isfinite(pc) & (pc < base)
                if good.all():
                    break
                s = np.where(good, s, 0.5 * s)
            idx = np.flatnonzero(stuck)
            better = np.isfinite(pc) & (pc < base)
            new_a[idx[better]] = cand[better]
            new_r[idx[better]] = rc[better]
            new_phi[idx[better]] = pc[better]
        a[active], r[active], phi[active] = new_a, new_r, new_phi

    res = float(np.sqrt(phi.max()))
    if not np.isfinite(res) or res > tol:
        raise NonConvergence(it, res)
    return a[0] if single else a


def hamiltonian(model, x, z, mu, tol: float = 1e-10):
    """``H = L(x, a*, mu) - a* . z`` at the minimiser ``a*``."""
    single = np.ndim(z) <= 1
    xb = _rows(x, model.dim_state)
    zb = _rows(z, model.dim_control)
    a = optimal_control(model, xb, zb, mu, tol)
    h = model.L(xb, a, mu) - np.sum(a * zb, axis=1)
    return float(h[0]) if single else h


def driver(model, x, z, mu, tol: float = 1e-10, a=None):
    """``F(x, z, mu) = L(x, a*(x, z, mu), mu)``."""
    single = np.ndim(z) <= 1
    xb = _rows(x, model.dim_state)
    zb = _rows(z, model.dim_control)
    if a is None:
        a = optimal_control(model, xb, zb, mu, tol)
    f = model.L(xb, _rows(a, model.dim_control), mu)
    return float(f[0]) if single else f


@dataclass
class DriverDerivatives:
    alpha: np.ndarray      # (N, m)
    F: np.ndarray          # (N,)
    grad_z: np.ndarray     # (N, m)
    grad_x: np.ndarray     # (N, d)
    G: np.ndarray          # (N, m, m) inverse control Hessian


def driver_derivatives(model, x, z, mu, a=None, tol: float = 1e-10) -> DriverDerivatives:
    """Driver value and first derivatives through the implicit function theorem.

    With ``G = (D2_aa L)^-1`` at the minimiser: ``grad_z F = G z`` and
    ``grad_x F = grad_x L - D2_xa L^T grad_z F``.
    """
    x = _rows(x, model.dim_state)
    z = _rows(z, model.dim_control)
    if a is None:
        a = optimal_control(model, x, z, mu, tol)
    G = np.linalg.inv(model.hess_aa(x, a, mu))
    gz = np.einsum("nij,nj->ni", G, z)
    gx = model.grad_x(x, a, mu) - np.einsum("nj,njk->nk", gz, model.hess_xa(x, a, mu))
    return DriverDerivatives(a, model.L(x, a, mu), gz, gx, G)


def driver_dmu(model, x, z, mu, v, a=None, grad_z=None, tol: float = 1e-10) -> np.ndarray:
    """``d_mu F(x, z, mu)(v) = d_mu L - grad_z F . d_mu(grad_a L)``, shape ``(N, d)``."""
    x = _rows(x, model.dim_state)
    z = _rows(z, model.dim_control)
    v = _rows(v, model.dim_state)
    if a is None:
        a = optimal_control(model, x, z, mu, tol)
    if grad_z is None:
        G = np.linalg.inv(model.hess_aa(x, a, mu))
        grad_z = np.einsum("nij,nj->ni", G, z)
    return model.dmu(x, a, mu, v) - np.einsum("nj,njk->nk", grad_z, model.dmu_grad_a(x, a, mu, v))


# --------------------------------------------------------------------------
# Assumption verification
# --------------------------------------------------------------------------


@dataclass
class SampleSpec:
    """Where to probe a model.

    Random samples are drawn uniformly from the boxes ``|x_k| <= x_bound``
    and ``|a_j| <= a_bound``; explicit ``x_points`` / ``a_points`` are
    crossed with each other and with ``measures``.
    """

    x_bound: float = 5.0
    a_bound: float = 5.0
    n_samples: int = 256
    measures: list | None = None
    x_points: np.ndarray | None = None
    a_points: np.ndarray | None = None
    seed: int = 0


@dataclass
class Violation:
    assumption: str
    point: dict
    lhs: float
    rhs: float

    def to_dict(self):
        return {"assumption": self.assumption, "point": self.point, "lhs": self.lhs, "rhs": self.rhs}


@dataclass
class AssumptionReport:
    gamma_hat: float
    C_hat: float
    violations: list = field(default_factory=list)
    samples_checked: int = 0
    advisory: list = field(default_factory=list)
    declared: dict = field(default_factory=dict)
    required_C: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self):
        return {
            "gamma_hat": self.gamma_hat,
            "C_hat": self.C_hat,
            "samples_checked": self.samples_checked,
            "declared": self.declared,
            "required_C": self.required_C,
            "violations": [v.to_dict() for v in self.violations],
            "advisory_violations": [v.to_dict() for v in self.advisory],
            "note": "sampled evidence only",
        }


def _default_measures(d: int) -> list[EmpiricalMeasure]:
    g = np.random.default_rng(12345)
    base = g.standard_normal((16, d))
    return [
        EmpiricalMeasure.dirac(np.zeros(d)),
        EmpiricalMeasure.uniform(base),
        EmpiricalMeasure.uniform(base + 1.0),
        EmpiricalMeasure.uniform(2.0 * base - 0.5),
    ]


def _opnorm(T):
    """Spectral norm of each matrix in a batch (vectors use Euclidean norm)."""
    if T.ndim == 2:
        return np.linalg.norm(T, axis=1)
    if T.ndim == 3:
        return np.linalg.norm(T, ord=2, axis=(1, 2))
    return np.sqrt(np.sum(T.reshape(len(T), -1) ** 2, axis=1))


def verify_assumptions(model: LagrangianModel, sample_spec: SampleSpec | None = None) -> AssumptionReport:
    """Evaluate every sampled inequality of the structural assumptions on ``L``.

    The declared constants ``model.constants`` (C, gamma, eta) are used on
    the right-hand sides.  The report also carries, per inequality, the
    smallest C that would have made it hold on the samples; ``C_hat`` is
    the largest of those.  Checks that rely on finite-difference third
    derivatives are reported under ``advisory``.
    """
    spec = sample_spec or SampleSpec()
    d, m = model.dim_state, model.dim_control
    measures = spec.measures or _default_measures(d)
    rng = np.random.default_rng(spec.seed)

    xs, as_, ks = [], [], []
    if spec.x_points is not None or spec.a_points is not None:
        xp = np.zeros((1, d)) if spec.x_points is None else _rows(spec.x_points, d)
        ap = np.zeros((1, m)) if spec.a_points is None else _rows(spec.a_points, m)
        for k in range(len(measures)):
            for xi in xp:
                for ai in ap:
                    xs.append(xi)
                    as_.append(ai)
                    ks.append(k)
    if spec.n_samples > 0:
        xr = rng.uniform(-spec.x_bound, spec.x_bound, (spec.n_samples, d))
        ar = rng.uniform(-spec.a_bound, spec.a_bound, (spec.n_samples, m))
        kr = rng.integers(0, len(measures), spec.n_samples)
        xs.extend(xr)
        as_.extend(ar)
        ks.extend(kr)
    if not xs:
        raise ValueError("empty sample set")
    X = np.array(xs, dtype=float)
    A = np.array(as_, dtype=float)
    K = np.array(ks, dtype=int)
    n = len(X)
    XI = rng.standard_normal((n, m))
    C, gamma, eta = model.constants["C"], model.constants["gamma"], model.constants["eta"]

    # evaluate everything per measure group
    fields = {}

    def put(name, idx, val):
        arr = fields.setdefault(name, np.empty((n,) + val.shape[1:]))
        arr[idx] = val

    for k, mu in enumerate(measures):
        idx = np.flatnonzero(K == k)
        if idx.size == 0:
            continue
        x, a, xi = X[idx], A[idx], XI[idx]
        v = mu.points[np.arange(idx.size) % mu.size]
        put("v", idx, v)
        zero = np.zeros_like(a)
        put("L0", idx, model.L(x, zero, mu))
        put("gx0", idx, model.grad_x(x, zero, mu))
        put("ga0", idx, model.grad_a(x, zero, mu))
        put("L", idx, model.L(x, a, mu))
        put("ga", idx, model.grad_a(x, a, mu))
        put("gx", idx, model.grad_x(x, a, mu))
        H = model.hess_aa(x, a, mu)
        put("Haa", idx, H)
        put("Hxa", idx, model.hess_xa(x, a, mu))
        put("Hxx", idx, model.hess_xx(x, a, mu))
        put("dmu", idx, model.dmu(x, a, mu, v))
        put("dmu_ga", idx, model.dmu_grad_a(x, a, mu, v))
        put("dmu_gx", idx, model.dmu_grad_x(x, a, mu, v))
        put("dmu_Haa", idx, model.dmu_hess_aa(x, a, mu, v))
        put("Txaa", idx, model.third_xaa(x, a, mu))
        G = np.linalg.inv(H)
        gxi = np.einsum("nij,nj->ni", G, xi)
        gda = np.einsum("nij,nj->ni", G, model.grad_a(x, a, mu))
        put("T3", idx, model.third_aaa_dir(x, a, mu, gxi, gxi, gda))
        put("xGx", idx, np.einsum("ni,ni->n", xi, gxi))

    for name, arr in fields.items():
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(arr.reshape(n, -1)), axis=1))[0])
            raise EvaluatorFailure({"x": X[bad].tolist(), "a": A[bad].tolist(), "field": name})

    na = np.linalg.norm(A, axis=1)
    nxi2 = np.sum(XI**2, axis=1)
    eig_min = np.linalg.eigvalsh((fields["Haa"] + np.swapaxes(fields["Haa"], 1, 2)) / 2)[:, 0]
    L = fields["L"]
    ga = fields["ga"]
    nga = np.linalg.norm(ga, axis=1)
    adot = np.sum(A * ga, axis=1)
    safe = np.where(na > 0, na, 1.0)

    # (id, lhs, rhs, required C per sample or None, advisory)
    checks = [
        ("zero_control_cost_bounded", np.abs(fields["L0"]), np.full(n, C), np.abs(fields["L0"]), False),
        ("zero_control_grad_x_bounded", _opnorm(fields["gx0"]), np.full(n, C), _opnorm(fields["gx0"]), False),
        ("zero_control_grad_a_bounded", _opnorm(fields["ga0"]), np.full(n, C), _opnorm(fields["ga0"]), False),
        ("strong_convexity", np.full(n, gamma), eig_min, None, False),
        ("hess_aa_bounded", _opnorm(fields["Haa"]), np.full(n, C), _opnorm(fields["Haa"]), False),
        ("hess_xa_linear_growth", _opnorm(fields["Hxa"]), C * (1 + na), _opnorm(fields["Hxa"]) / (1 + na), False),
        ("hess_xx_quadratic_growth", _opnorm(fields["Hxx"]), C * (1 + na**2), _opnorm(fields["Hxx"]) / (1 + na**2), False),
        ("dmu_grad_a_linear_growth", _opnorm(fields["dmu_ga"]), C * (1 + na), _opnorm(fields["dmu_ga"]) / (1 + na), False),
        ("dmu_grad_x_quadratic_growth", _opnorm(fields["dmu_gx"]), C * (1 + na**2), _opnorm(fields["dmu_gx"]) / (1 + na**2), False),
        ("cost_lower_growth", gamma / 2 * na**2 - C, L, gamma / 2 * na**2 - L, False),
        ("cost_upper_growth", L, C * (1 + na**2), L / (1 + na**2), False),
        ("grad_x_growth", _opnorm(fields["gx"]), C * (1 + na**2), _opnorm(fields["gx"]) / (1 + na**2), False),
        ("grad_a_coercive", gamma * na**2, adot + C * na, (gamma * na**2 - adot) / safe, False),
        ("grad_a_lower_growth", gamma * na, nga + C, gamma * na - nga, False),
        ("grad_a_upper_growth", nga + C, C * (1 + na), np.where(na > 0, nga / safe, 0.0), False),
        ("third_derivative_lower", -C * nxi2, fields["T3"], -fields["T3"] / nxi2, not model.analytic_third),
        ("third_derivative_upper", fields["T3"], fields["xGx"] - eta * nxi2, None, not model.analytic_third),
        ("third_xaa_bounded", _opnorm(fields["Txaa"]), np.full(n, C), _opnorm(fields["Txaa"]), not model.analytic_third),
        ("dmu_hess_aa_bounded", _opnorm(fields["dmu_Haa"]), np.full(n, C), _opnorm(fields["dmu_Haa"]), False),
    ]

    # Lipschitz-type inequalities on sample pairs (k, k+1)
    j = np.roll(np.arange(n), -1)
    w2 = np.array([wasserstein2(measures[K[i]], measures[K[j[i]]],
                                mode="exact" if d == 1 else "sliced") for i in range(n)])
    dx = np.linalg.norm(X[j] - X, axis=1)
    dv = np.linalg.norm(fields["v"][j] - fields["v"], axis=1)
    da = np.linalg.norm(A[j] - A, axis=1)
    s = 1 + na + na[j]
    lhs4 = _opnorm(fields["dmu"][j] - fields["dmu"])
    fac4 = s * (s * (dx + w2 + dv) + da)
    lhs5 = _opnorm(fields["Hxa"][j] - fields["Hxa"])
    fac5 = s * (dx + w2) + da
    lhs6 = _opnorm(fields["dmu_ga"][j] - fields["dmu_ga"])
    fac6 = s * (dx + w2 + dv) + da

    def ratio(lhs, fac):
        return np.where(fac > 0, lhs / np.where(fac > 0, fac, 1.0), np.where(lhs > 0, np.inf, 0.0))

    checks += [
        ("dmu_lipschitz", lhs4, C * fac4, ratio(lhs4, fac4), False),
        ("hess_xa_lipschitz", lhs5, C * fac5, ratio(lhs5, fac5), False),
        ("dmu_grad_a_lipschitz", lhs6, C * fac6, ratio(lhs6, fac6), False),
    ]

    report = AssumptionReport(gamma_hat=float(eig_min.min()), C_hat=0.0, samples_checked=n,
                              declared=dict(model.constants))
    slack = 1e-9
    for name, lhs, rhs, req, advisory in checks:
        bad = np.flatnonzero(lhs > rhs + slack * (1 + np.abs(rhs)))
        target = report.advisory if advisory else report.violations
        for i in bad:
            point = {"x": X[i].tolist(), "a": A[i].tolist(), "measure": int(K[i])}
            target.append(Violation(name, point, float(lhs[i]), float(rhs[i])))
        if req is not None:
            rc = float(np.max(req))
            report.required_C[name] = rc
            if not advisory:
                report.C_hat = max(report.C_hat, rc)
    return report


def monotonicity_check(B: Callable, mu: EmpiricalMeasure, mu_p: EmpiricalMeasure) -> float:
    """``int [B(x, mu) - B(x, mu')] d(mu - mu')(x)`` on the two supports.

    ``B(points, measure)`` must return one value per point.  Non-negative
    values are evidence of Lasry-Lions monotonicity for this pair.
    """
    on_mu = np.asarray(B(mu.points, mu), float) - np.asarray(B(mu.points, mu_p), float)
    on_mp = np.asarray(B(mu_p.points, mu), float) - np.asarray(B(mu_p.points, mu_p), float)
    if not (np.all(np.isfinite(on_mu)) and np.all(np.isfinite(on_mp))):
        raise EvaluatorFailure("monotonicity integrand")
    return float(mu.weights @ on_mu - mu_p.weights @ on_mp)


# --------------------------------------------------------------------------
# Terminal costs
# --------------------------------------------------------------------------


class TerminalCost:
    """Terminal cost ``g(x, mu)`` evaluated on a batch ``x`` of shape ``(N, d)``."""

    measure_dependent = False
    name = "terminal"

    def value(self, x, mu):
        raise NotImplementedError

    def grad_x(self, x, mu):
        raise NotImplementedError

    def hess_xx(self, x, mu):
        return np.zeros((len(x), x.shape[1], x.shape[1]))

    def dmu(self, x, mu, v):
        return np.zeros_like(x)

    def __call__(self, x, mu):
        return self.value(x, mu)


class ConstantTerminal(TerminalCost):
    name = "constant"

    def __init__(self, c: float = 0.0):
        self.c = float(c)

    def value(self, x, mu):
        return np.full(len(x), self.c)

    def grad_x(self, x, mu):
        return np.zeros_like(x)


class LinearTerminal(TerminalCost):
    """``g(x) = coef . x``."""

    name = "linear"

    def __init__(self, coef=1.0):
        self.coef = np.atleast_1d(np.asarray(coef, float))

    def value(self, x, mu):
        return x @ np.broadcast_to(self.coef, (x.shape[1],))

    def grad_x(self, x, mu):
        return np.broadcast_to(self.coef, x.shape).copy()


class SquareTerminal(TerminalCost):
    """``g(x) = scale |x|^2``."""

    name = "square"

    def __init__(self, scale: float = 1.0):
        self.scale = float(scale)

    def value(self, x, mu):
        return self.scale * np.sum(x**2, axis=1)

    def grad_x(self, x, mu):
        return 2 * self.scale * x

    def hess_xx(self, x, mu):
        d = x.shape[1]
        return np.broadcast_to(2 * self.scale * np.eye(d), (len(x), d, d)).copy()


class MeanCouplingTerminal(TerminalCost):
    """``g(x, mu) = scale * x . mean(mu)``; monotone for ``scale >= 0``."""

    measure_dependent = True
    name = "mean_coupling"

    def __init__(self, scale: float = 1.0):
        self.scale = float(scale)

    def value(self, x, mu):
        return self.scale * (x @ np.atleast_1d(mu.mean()))

    def grad_x(self, x, mu):
        return self.scale * np.broadcast_to(np.atleast_1d(mu.mean()), x.shape).copy()

    def dmu(self, x, mu, v):
        return self.scale * x


class CallableTerminal(TerminalCost):
    """Wraps ``g(x, mu)``; derivatives by central differences."""

    def __init__(self, fn, measure_dependent: bool = True, name: str = "callable"):
        self.fn = fn
        self.measure_dependent = measure_dependent
        self.name = name

    def value(self, x, mu):
        return np.asarray(self.fn(x, mu), float)

    def grad_x(self, x, mu):
        cols = []
        for k in range(x.shape[1]):
            e = np.zeros(x.shape[1])
            e[k] = FD_STEP
            cols.append((self.value(x + e, mu) - self.value(x - e, mu)) / (2 * FD_STEP))
        return np.stack(cols, axis=1)


def as_terminal(g) -> TerminalCost:
    if isinstance(g, TerminalCost):
        return g
    if callable(g):
        return CallableTerminal(g)
    return ConstantTerminal(float(g))
