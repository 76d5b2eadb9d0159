"""Model manifolds of bounded geometry and their normal coordinate charts.

Three model families are provided. Points are stored in ambient coordinates:

* ``EuclideanModel``: R^N, exact closed forms.
* ``HyperbolicModel``: the hyperboloid sheet in Minkowski space R^{N+1}.
* ``PerturbedEuclideanModel``: R^N with a conformal metric ``lam(x) * I`` where
  ``lam = 1 + a * beta`` and ``beta`` is a smooth compactly supported bump.
  Geodesics are integrated with fixed-step RK4 and ``log`` is computed by
  Newton shooting.

All model methods are batched: a base point ``x`` may be ``(D,)`` or ``(m, D)``,
a frame ``(D, N)`` or ``(m, D, N)`` and tangent coordinates ``(m, N)``.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

ORTHONORMAL_TOL = 1e-10
SPD_MIN_EIGENVALUE = 0.5
JACOBIAN_STEP = 1e-4


class GeometryError(ValueError):
    """A point or tangent vector lies outside the domain of an operation."""


class NumericalError(RuntimeError):
    """An iterative or integration routine failed to reach its tolerance."""

    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


def _as_batch(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != dim:
        raise GeometryError(f"expected trailing dimension {dim}, got shape {x.shape}")
    return x


def _frames(frame: np.ndarray, m: int) -> np.ndarray:
    frame = np.asarray(frame, dtype=float)
    if frame.ndim == 2:
        return np.broadcast_to(frame, (m,) + frame.shape)
    return frame


def _bases(x: np.ndarray, m: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return np.broadcast_to(x, (m, x.shape[0]))
    return x


def _point_seed(seed: int, x: np.ndarray) -> np.random.Generator:
    key = zlib.crc32(np.round(np.asarray(x, dtype=float), 9).tobytes())
    return np.random.default_rng([int(seed), key])


def random_rotation(rng: np.random.Generator, n: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix with a deterministic sign convention."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class ManifoldModel:
    """Common interface of the model manifolds."""

    kind: str = ""
    dimension: int
    ambient_dim: int
    injectivity_floor: float
    # When True, ambient Euclidean distance is a lower bound for the geodesic
    # distance, so KD-tree queries can prefilter neighbour searches.
    ambient_lower_bound: bool = False

    def origin(self) -> np.ndarray:
        raise NotImplementedError

    def ambient_metric(self, X: np.ndarray) -> np.ndarray:
        """Metric tensor on ambient coordinates at ``X``, shape ``(m, D, D)``."""
        raise NotImplementedError

    def projection_form(self) -> np.ndarray:
        """Constant ambient bilinear form used to pair covectors with tangent vectors."""
        return np.eye(self.ambient_dim)

    def canonical_frame(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def seeded_frame(self, x: np.ndarray, seed: int) -> np.ndarray:
        rot = random_rotation(_point_seed(seed, x), self.dimension)
        return self.canonical_frame(x) @ rot

    def exp(self, x, frame, v) -> np.ndarray:
        raise NotImplementedError

    def log(self, x, frame, q) -> np.ndarray:
        raise NotImplementedError

    def exp_jacobian(self, x, frame, v) -> np.ndarray:
        """Differential of ``v -> exp(x, frame, v)``, shape ``(m, D, N)``."""
        raise NotImplementedError

    def distance(self, x, q) -> np.ndarray:
        raise NotImplementedError

    def distance_and_differential(self, c, X):
        """Distance from the fixed point ``c`` to each row of ``X`` and its
        differential with respect to ``X`` as an ambient covector."""
        raise NotImplementedError

    def distances_to_centers(self, C, X, cutoff: float | None = None):
        """Distances from each row of ``X`` to each centre in ``C`` and their
        differentials: shapes ``(m, n)`` and ``(m, n, D)``.

        Entries whose distance is at least ``cutoff`` may be replaced by any
        value not below ``cutoff``.
        """
        C = np.atleast_2d(C)
        X = np.atleast_2d(X)
        d = np.empty((len(X), len(C)))
        dd = np.empty((len(X), len(C), X.shape[1]))
        for j, c in enumerate(C):
            d[:, j], dd[:, j] = self.distance_and_differential(c, X)
        return d, dd

    def in_ball(self, X, c, radius) -> np.ndarray:
        """Boolean mask of rows of ``X`` within geodesic distance ``radius`` of ``c``.

        May be conservative (report extra points) but never misses one.
        """
        return self.distance(X, c) < radius

    def check_point(self, x) -> None:
        pass

    def tangent_norm(self, x, frame, v) -> np.ndarray:
        return np.linalg.norm(_as_batch(v, self.dimension), axis=1)


class EuclideanModel(ManifoldModel):
    kind = "euclidean"
    ambient_lower_bound = True

    def __init__(self, dimension: int, injectivity_cap: float = 100.0):
        if dimension < 1:
            raise GeometryError("dimension must be positive")
        self.dimension = dimension
        self.ambient_dim = dimension
        self.injectivity_floor = float(injectivity_cap)

    def origin(self):
        return np.zeros(self.dimension)

    def ambient_metric(self, X):
        X = _as_batch(X, self.ambient_dim)
        return np.broadcast_to(np.eye(self.dimension), (len(X), self.dimension, self.dimension))

    def canonical_frame(self, x):
        return np.eye(self.dimension)

    def exp(self, x, frame, v):
        v = _as_batch(v, self.dimension)
        F = _frames(frame, len(v))
        return _bases(x, len(v)) + np.einsum("mdn,mn->md", F, v)

    def log(self, x, frame, q):
        q = _as_batch(q, self.dimension)
        F = _frames(frame, len(q))
        return np.einsum("mdn,md->mn", F, q - _bases(x, len(q)))

    def exp_jacobian(self, x, frame, v):
        v = _as_batch(v, self.dimension)
        return np.array(_frames(frame, len(v)))

    def distance(self, x, q):
        x = np.asarray(x, dtype=float)
        q = np.asarray(q, dtype=float)
        return np.linalg.norm(np.atleast_2d(q - x), axis=-1)

    def distance_and_differential(self, c, X):
        X = _as_batch(X, self.dimension)
        diff = X - np.asarray(c, dtype=float)
        d = np.linalg.norm(diff, axis=1)
        safe = np.where(d > 0, d, 1.0)
        return d, np.where(d[:, None] > 0, diff / safe[:, None], 0.0)

    def distances_to_centers(self, C, X, cutoff: float | None = None):
        diff = np.atleast_2d(X)[:, None, :] - np.atleast_2d(C)[None, :, :]
        d = np.sqrt(np.sum(diff * diff, axis=2))
        safe = np.where(d > 0, d, 1.0)
        return d, np.where(d[..., None] > 0, diff / safe[..., None], 0.0)

    def in_ball(self, X, c, radius):
        X = _as_batch(X, self.dimension)
        diff = X - c
        return np.einsum("md,md->m", diff, diff) < radius * radius


def minkowski(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Lorentzian inner product with signature (-, +, ..., +) along the last axis."""
    return np.sum(a[..., 1:] * b[..., 1:], axis=-1) - a[..., 0] * b[..., 0]


def _sinhc(t):
    """sinh(t)/t, accurate near zero."""
    t = np.asarray(t, dtype=float)
    small = np.abs(t) < 1e-4
    ts = np.where(small, 1.0, t)
    return np.where(small, 1.0 + t * t / 6.0, np.sinh(ts) / ts)


def _sinhc_prime_over_t(t):
    """(t cosh t - sinh t) / t^3, the derivative of sinhc divided by t."""
    t = np.asarray(t, dtype=float)
    small = np.abs(t) < 1e-2
    ts = np.where(small, 1.0, t)
    exact = (ts * np.cosh(ts) - np.sinh(ts)) / ts**3
    series = 1.0 / 3.0 + t * t / 30.0 + t**4 / 840.0
    return np.where(small, series, exact)


class HyperbolicModel(ManifoldModel):
    """Hyperbolic space as the upper sheet of ``<x, x> = -1`` in R^{N+1}."""

    kind = "hyperbolic"

    def __init__(self, dimension: int, injectivity_cap: float = 10.0):
        if dimension < 2:
            raise GeometryError("hyperbolic model needs dimension >= 2")
        self.dimension = dimension
        self.ambient_dim = dimension + 1
        self.injectivity_floor = float(injectivity_cap)
        self._eta = np.diag([-1.0] + [1.0] * dimension)

    def origin(self):
        o = np.zeros(self.ambient_dim)
        o[0] = 1.0
        return o

    def lift(self, coords: np.ndarray) -> np.ndarray:
        """Hyperboloid point with the given spatial coordinates."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        x0 = np.sqrt(1.0 + np.sum(coords**2, axis=1))
        return np.column_stack([x0, coords])

    def check_point(self, x):
        x = _as_batch(x, self.ambient_dim)
        err = np.abs(minkowski(x, x) + 1.0) / (1.0 + x[:, 0] ** 2)
        if np.any(err > 1e-8) or np.any(x[:, 0] <= 0):
            raise GeometryError("point is not on the upper hyperboloid sheet")

    def ambient_metric(self, X):
        X = _as_batch(X, self.ambient_dim)
        return np.broadcast_to(self._eta, (len(X),) + self._eta.shape)

    def projection_form(self):
        return self._eta

    def boost(self, x: np.ndarray) -> np.ndarray:
        """Lorentz transformation taking the origin to ``x``."""
        x = np.asarray(x, dtype=float)
        x0, xs = x[0], x[1:]
        B = np.empty((self.ambient_dim, self.ambient_dim))
        B[0, 0] = x0
        B[0, 1:] = xs
        B[1:, 0] = xs
        B[1:, 1:] = np.eye(self.dimension) + np.outer(xs, xs) / (1.0 + x0)
        return B

    def canonical_frame(self, x):
        return self.boost(x)[:, 1:]

    def exp(self, x, frame, v):
        v = _as_batch(v, self.dimension)
        m = len(v)
        X = _bases(x, m)
        u = np.einsum("mdn,mn->md", _frames(frame, m), v)
        t = np.linalg.norm(v, axis=1)
        if np.any(t > self.injectivity_floor):
            raise GeometryError("tangent vector exceeds the injectivity floor")
        out = np.cosh(t)[:, None] * X + _sinhc(t)[:, None] * u
        return out

    def log(self, x, frame, q):
        q = _as_batch(q, self.ambient_dim)
        m = len(q)
        X = _bases(x, m)
        diff = q - X
        chord2 = np.maximum(minkowski(diff, diff), 0.0)
        d = 2.0 * np.arcsinh(np.sqrt(chord2) / 2.0)
        # q - s x with s - 1 = chord^2 / 2, the tangent direction at x.
        u = diff - (chord2 / 2.0)[:, None] * X
        v_amb = u / _sinhc(d)[:, None]
        F = _frames(frame, m)
        return np.einsum("mdn,md->mn", F * np.diag(self._eta)[None, :, None], v_amb)

    def exp_jacobian(self, x, frame, v):
        v = _as_batch(v, self.dimension)
        m = len(v)
        X = _bases(x, m)
        F = _frames(frame, m)
        u = np.einsum("mdn,mn->md", F, v)
        t = np.linalg.norm(v, axis=1)
        sc = _sinhc(t)
        c3 = _sinhc_prime_over_t(t)
        J = sc[:, None, None] * F
        J = J + np.einsum("md,mn->mdn", X, sc[:, None] * v)
        J = J + np.einsum("md,mn->mdn", u, c3[:, None] * v)
        return J

    def distance(self, x, q):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        q = np.atleast_2d(np.asarray(q, dtype=float))
        diff = q - x
        chord2 = np.maximum(minkowski(diff, diff), 0.0)
        return 2.0 * np.arcsinh(np.sqrt(chord2) / 2.0)

    def distance_and_differential(self, c, X):
        X = _as_batch(X, self.ambient_dim)
        c = np.asarray(c, dtype=float)
        diff = c - X
        chord2 = np.maximum(minkowski(diff, diff), 0.0)
        d = 2.0 * np.arcsinh(np.sqrt(chord2) / 2.0)
        tangent = diff - (chord2 / 2.0)[:, None] * X
        sh = np.sinh(d)
        safe = np.where(sh > 0, sh, 1.0)
        cov = -(tangent * np.diag(self._eta)) / safe[:, None]
        return d, np.where(d[:, None] > 0, cov, 0.0)

    def distances_to_centers(self, C, X, cutoff: float | None = None):
        X = np.atleast_2d(X)[:, None, :]
        diff = np.atleast_2d(C)[None, :, :] - X
        chord2 = np.maximum(minkowski(diff, diff), 0.0)
        d = 2.0 * np.arcsinh(np.sqrt(chord2) / 2.0)
        tangent = diff - (chord2 / 2.0)[..., None] * X
        sh = np.sinh(d)
        safe = np.where(sh > 0, sh, 1.0)
        cov = -(tangent * np.diag(self._eta)) / safe[..., None]
        return d, np.where(d[..., None] > 0, cov, 0.0)

    def in_ball(self, X, c, radius):
        X = _as_batch(X, self.ambient_dim)
        return -minkowski(X, np.asarray(c, dtype=float)) < np.cosh(radius)


@dataclass(frozen=True)
class MetricBump:
    """Conformal factor ``lam(x) = 1 + amplitude * beta(|x - center| / radius)``
    with ``beta(t) = exp(1 - 1 / (1 - t^2))`` for ``t < 1`` and 0 otherwise."""

    center: tuple
    radius: float
    amplitude: float

    def factor(self, X: np.ndarray):
        """Return ``lam`` and its gradient at the rows of ``X``."""
        c = np.asarray(self.center, dtype=float)
        Y = X - c
        s = np.sum(Y * Y, axis=-1) / self.radius**2
        inside = s < 1.0
        denom = np.where(inside, 1.0 - s, 1.0)
        beta = np.where(inside, np.exp(1.0 - 1.0 / denom), 0.0)
        dbeta_ds = -beta / denom**2
        lam = 1.0 + self.amplitude * beta
        grad = (self.amplitude * 2.0 / self.radius**2) * dbeta_ds[..., None] * Y
        return lam, grad

    def radial_profile(self, t: np.ndarray):
        """``f = log(lam) / 2`` and its first two radial derivatives."""
        t = np.asarray(t, dtype=float)
        r = t * self.radius
        h = 1e-5 * self.radius

        def f(rr):
            s = (rr / self.radius) ** 2
            inside = s < 1.0
            denom = np.where(inside, 1.0 - s, 1.0)
            beta = np.where(inside, np.exp(1.0 - 1.0 / denom), 0.0)
            return 0.5 * np.log1p(self.amplitude * beta)

        f0 = f(r)
        f1 = (f(r + h) - f(r - h)) / (2 * h)
        f2 = (f(r + h) - 2 * f0 + f(r - h)) / (h * h)
        return f0, f1, f2


class PerturbedEuclideanModel(ManifoldModel):
    """R^N with the conformally perturbed metric ``lam(x) * I``.

    ``lam >= 1`` everywhere, so Euclidean distance bounds geodesic distance
    from below and geodesics are straight lines away from the bump.
    """

    kind = "perturbed-euclidean"
    ambient_lower_bound = True

    def __init__(
        self,
        dimension: int,
        bump: MetricBump,
        injectivity_cap: float = 100.0,
        step_fraction: float = 1.0 / 40.0,
        max_steps: int = 20000,
    ):
        if bump.amplitude <= 0:
            raise GeometryError("perturbation amplitude must be positive")
        if bump.radius <= 0:
            raise GeometryError("perturbation radius must be positive")
        if len(bump.center) != dimension:
            raise GeometryError("perturbation center has the wrong dimension")
        self.dimension = dimension
        self.ambient_dim = dimension
        self.bump = bump
        self._c = np.asarray(bump.center, dtype=float)
        self.step = bump.radius * step_fraction
        self.max_steps = max_steps
        self.curvature_bound = self._curvature_bound()
        floor = injectivity_cap
        if self.curvature_bound > 0:
            floor = min(floor, np.pi / np.sqrt(self.curvature_bound))
        self.injectivity_floor = float(floor)

    def _curvature_bound(self) -> float:
        # For g = e^{2f} I: |K| <= e^{-2f} (2 |Hess f| + |grad f|^2).
        t = np.linspace(1e-4, 1 - 1e-4, 4001)
        f0, f1, f2 = self.bump.radial_profile(t)
        r = t * self.bump.radius
        hess = np.maximum(np.abs(f2), np.abs(f1 / r))
        return float(np.max(np.exp(-2 * f0) * (2 * hess + f1**2)))

    def origin(self):
        return np.zeros(self.dimension)

    def conformal_factor(self, X):
        return self.bump.factor(_as_batch(X, self.dimension))

    def ambient_metric(self, X):
        lam, _ = self.conformal_factor(X)
        return lam[:, None, None] * np.eye(self.dimension)[None]

    def canonical_frame(self, x):
        lam, _ = self.conformal_factor(x)
        return np.eye(self.dimension) / np.sqrt(lam[0])

    def canonical_frames(self, X):
        lam, _ = self.conformal_factor(X)
        return np.eye(self.dimension)[None] / np.sqrt(lam)[:, None, None]

    def in_ball(self, X, c, radius):
        # lam >= 1, so the Euclidean ball contains the geodesic ball.
        X = _as_batch(X, self.dimension)
        diff = X - np.asarray(c, dtype=float)
        return np.einsum("md,md->m", diff, diff) < radius * radius

    def distances_to_centers(self, C, X, cutoff: float | None = None):
        C = np.atleast_2d(C)
        X = _as_batch(X, self.dimension)
        diff = X[:, None, :] - C[None, :, :]
        d = np.sqrt(np.sum(diff * diff, axis=2))
        safe = np.where(d > 0, d, 1.0)
        dd = np.where(d[..., None] > 0, diff / safe[..., None], 0.0)
        for j, c in enumerate(C):
            rows = np.nonzero(d[:, j] < cutoff)[0] if cutoff is not None else np.arange(len(X))
            if len(rows):
                d[rows, j], dd[rows, j] = self.distance_and_differential(c, X[rows])
        return d, dd

    def _misses(self, X, V):
        """Rows whose straight segment ``X -> X + V`` avoids the bump support."""
        rel = self._c - X
        vv = np.sum(V * V, axis=1)
        t = np.clip(np.sum(rel * V, axis=1) / np.where(vv > 0, vv, 1.0), 0.0, 1.0)
        closest = X + t[:, None] * V
        return np.sum((closest - self._c) ** 2, axis=1) >= self.bump.radius**2

    def _accel(self, X, V):
        lam, grad = self.bump.factor(X)
        gv = np.sum(grad * V, axis=1)
        vv = np.sum(V * V, axis=1)
        return -(2 * gv[:, None] * V - vv[:, None] * grad) / (2 * lam[:, None])

    def step_counts(self, X, V):
        length = np.linalg.norm(V, axis=1) * np.sqrt(1.0 + self.bump.amplitude)
        n = np.maximum(1, np.ceil(length / self.step)).astype(int)
        if np.any(n > self.max_steps):
            raise NumericalError("geodesic integration would exceed the step budget")
        return n

    def integrate(self, X, V, n_steps):
        """RK4 for the geodesic ODE over unit time with per-row step counts."""
        X = np.array(X, dtype=float)
        V = np.array(V, dtype=float)
        dt = (1.0 / n_steps)[:, None]
        for s in range(int(n_steps.max(initial=0))):
            act = s < n_steps
            if not np.all(act):
                idx = np.nonzero(act)[0]
                x, v, h = X[idx], V[idx], dt[idx]
            else:
                idx = None
                x, v, h = X, V, dt
            k1x, k1v = v, self._accel(x, v)
            k2x = v + 0.5 * h * k1v
            k2v = self._accel(x + 0.5 * h * k1x, k2x)
            k3x = v + 0.5 * h * k2v
            k3v = self._accel(x + 0.5 * h * k2x, k3x)
            k4x = v + h * k3v
            k4v = self._accel(x + h * k3x, k4x)
            nx = x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
            nv = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
            if idx is None:
                X, V = nx, nv
            else:
                X[idx], V[idx] = nx, nv
        return X, V

    def _exp_coords(self, X, V, n_steps=None):
        out = X + V
        hit = ~self._misses(X, V)
        if np.any(hit):
            if n_steps is None:
                n_steps = self.step_counts(X[hit], V[hit])
            else:
                n_steps = n_steps[hit]
            out[hit], _ = self.integrate(X[hit], V[hit], n_steps)
        return out

    def exp(self, x, frame, v):
        v = _as_batch(v, self.dimension)
        m = len(v)
        X = np.array(_bases(x, m))
        V = np.einsum("mdn,mn->md", _frames(frame, m), v)
        return self._exp_coords(X, V)

    def exp_jacobian(self, x, frame, v):
        v = _as_batch(v, self.dimension)
        m = len(v)
        X = np.array(_bases(x, m))
        F = np.array(_frames(frame, m))
        V = np.einsum("mdn,mn->md", F, v)
        n_steps = self.step_counts(X, V)
        J = np.empty((m, self.dimension, self.dimension))
        h = JACOBIAN_STEP
        for a in range(self.dimension):
            dV = h * F[:, :, a]
            plus = self._exp_coords(X, V + dV, n_steps)
            minus = self._exp_coords(X, V - dV, n_steps)
            J[:, :, a] = (plus - minus) / (2 * h)
        return J

    def log(self, x, frame, q, tol: float = 1e-12, max_iter: int = 40):
        q = _as_batch(q, self.dimension)
        m = len(q)
        X = np.array(_bases(x, m))
        F = np.array(_frames(frame, m))
        Finv = np.linalg.inv(F)
        xi = np.einsum("mnd,md->mn", Finv, q - X)
        miss = self._misses(X, q - X)
        todo = np.nonzero(~miss)[0]
        if len(todo) == 0:
            return xi
        Xs, Fs, qs, z = X[todo], F[todo], q[todo], xi[todo]
        scale = tol * (1.0 + np.linalg.norm(qs, axis=1))
        r = self.exp(Xs, Fs, z) - qs
        res = np.linalg.norm(r, axis=1)
        # Chord iteration: the Jacobian is refreshed only for rows that stall.
        J = np.zeros((len(todo), self.dimension, self.dimension))
        stale = np.ones(len(todo), dtype=bool)
        for _ in range(max_iter):
            active = res > scale
            if not np.any(active):
                break
            refresh = np.nonzero(active & stale)[0]
            if len(refresh):
                J[refresh] = self.exp_jacobian(Xs[refresh], Fs[refresh], z[refresh])
                stale[refresh] = False
            a = np.nonzero(active)[0]
            step = np.linalg.solve(J[a], r[a][..., None])[..., 0]
            t = np.ones(len(a))
            for _ in range(12):
                trial = z[a] - t[:, None] * step
                rt = self.exp(Xs[a], Fs[a], trial) - qs[a]
                nt = np.linalg.norm(rt, axis=1)
                better = nt < res[a]
                if np.all(better):
                    break
                t = np.where(better, t, 0.5 * t)
            stale[a] = nt > 0.1 * res[a]
            z[a], r[a], res[a] = trial, rt, nt
        if np.any(res > scale):
            raise NumericalError("log shooting did not converge", float(res.max()))
        xi[todo] = z
        return xi

    def distance(self, x, q):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        q = np.atleast_2d(np.asarray(q, dtype=float))
        x, q = np.broadcast_arrays(x, q)
        x, q = np.array(x), np.array(q)
        d = np.linalg.norm(q - x, axis=1)
        hit = np.nonzero(~self._misses(x, q - x))[0]
        if len(hit) == 0:
            return d
        xs = x[hit]
        try:
            xi = self.log(xs, self.canonical_frames(xs), q[hit])
            dh = np.linalg.norm(xi, axis=1)
            ok = dh < self.injectivity_floor
        except NumericalError:
            dh = np.full(len(hit), np.inf)
            ok = np.zeros(len(hit), dtype=bool)
        for j in np.nonzero(~ok)[0]:
            dh[j] = self.polyline_distance(xs[j], q[hit[j]])
        d[hit] = dh
        return d

    def distance_and_differential(self, c, X):
        X = _as_batch(X, self.dimension)
        c = np.asarray(c, dtype=float)
        diff = X - c
        d = np.linalg.norm(diff, axis=1)
        safe = np.where(d > 0, d, 1.0)
        cov = np.where(d[:, None] > 0, diff / safe[:, None], 0.0)
        hit = np.nonzero(~self._misses(X, c - X) & (d > 0))[0]
        if len(hit):
            Xh = X[hit]
            lam, _ = self.conformal_factor(Xh)
            xi = self.log(Xh, self.canonical_frames(Xh), np.broadcast_to(c, Xh.shape))
            dh = np.linalg.norm(xi, axis=1)
            if np.any(dh >= self.injectivity_floor):
                raise GeometryError("distance beyond the injectivity floor")
            d[hit] = dh
            cov[hit] = -np.sqrt(lam)[:, None] * xi / dh[:, None]
        return d, cov

    def polyline_distance(self, x, q, n_interior: int = 15) -> float:
        """Length-minimizing polyline between two points; fallback for long pairs."""
        x = np.asarray(x, dtype=float)
        q = np.asarray(q, dtype=float)
        ts = np.linspace(0, 1, n_interior + 2)[1:-1]
        init = x + ts[:, None] * (q - x)

        def length(flat):
            pts = np.vstack([x, flat.reshape(n_interior, -1), q])
            seg = np.diff(pts, axis=0)
            mid = 0.5 * (pts[1:] + pts[:-1])
            lam, _ = self.bump.factor(mid)
            return float(np.sum(np.sqrt(lam) * np.linalg.norm(seg, axis=1)))

        res = minimize(length, init.ravel(), method="L-BFGS-B")
        return float(min(res.fun, length(init.ravel())))


def integrate_geodesic(model: ManifoldModel, x, frame, v, n_steps: int = 400):
    """Reference geodesic by direct RK4 integration of the geodesic equation.

    Independent of the closed forms in ``exp``; used as a cross-check.
    """
    v = _as_batch(v, model.dimension)
    m = len(v)
    X = np.array(_bases(x, m), dtype=float)
    V = np.einsum("mdn,mn->md", _frames(frame, m), v)
    if isinstance(model, PerturbedEuclideanModel):
        out, _ = model.integrate(X, V, np.full(m, n_steps))
        return out
    if isinstance(model, EuclideanModel):
        return X + V

    def acc(x, vel):
        # Geodesics of the hyperboloid: x'' = <x', x'> x.
        return minkowski(vel, vel)[:, None] * x

    h = 1.0 / n_steps
    for _ in range(n_steps):
        k1x, k1v = V, acc(X, V)
        k2x, k2v = V + 0.5 * h * k1v, acc(X + 0.5 * h * k1x, V + 0.5 * h * k1v)
        k3x, k3v = V + 0.5 * h * k2v, acc(X + 0.5 * h * k2x, V + 0.5 * h * k2v)
        k4x, k4v = V + h * k3v, acc(X + h * k3x, V + h * k3v)
        X = X + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        V = V + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return X


@dataclass(frozen=True)
class Frame:
    base_point: np.ndarray
    basis: np.ndarray


@dataclass(eq=False)
class NormalChart:
    """``e_y = exp_y o i_y`` restricted to the Euclidean ball of radius ``radius``."""

    model: ManifoldModel
    center: np.ndarray
    radius: float
    frame: Frame
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def basis(self) -> np.ndarray:
        return self.frame.basis

    def forward(self, xi) -> np.ndarray:
        return self.model.exp(self.center, self.basis, xi)

    def inverse(self, X) -> np.ndarray:
        return self.model.log(self.center, self.basis, X)

    def jacobian(self, xi) -> np.ndarray:
        return self.model.exp_jacobian(self.center, self.basis, xi)

    def covector_of(self, xi, J, dw) -> np.ndarray:
        """Ambient covector of ``w o e^{-1}`` given chart gradient ``dw`` at ``xi``."""
        A = self.model.projection_form()
        AJ = np.einsum("de,men->mdn", A, J)
        G = np.einsum("mdn,mdk->mnk", J, AJ)
        a = np.linalg.solve(G, dw[..., None])[..., 0]
        return np.einsum("mdn,mn->md", AJ, a)


def _frame_orthonormality(model: ManifoldModel, x, F) -> float:
    g = model.ambient_metric(np.atleast_2d(x))[0]
    G = F.T @ g @ F
    return float(np.max(np.abs(G - np.eye(model.dimension))))


def make_normal_chart(model: ManifoldModel, y, r: float, seed: int | None = None) -> NormalChart:
    """Normal coordinate chart at ``y`` of radius ``r``.

    ``seed=None`` selects the canonical frame; an integer seed selects a
    pseudo-random rotation of it that depends only on ``(seed, y)``.
    """
    y = np.asarray(y, dtype=float)
    model.check_point(y)
    if not 0 < r < model.injectivity_floor:
        raise GeometryError(
            f"chart radius {r} must lie in (0, {model.injectivity_floor}) for this model"
        )
    F = model.canonical_frame(y) if seed is None else model.seeded_frame(y, seed)
    if _frame_orthonormality(model, y, F) > ORTHONORMAL_TOL:
        raise GeometryError("frame is not orthonormal")
    return NormalChart(model, y, float(r), Frame(y, F))


@dataclass
class MetricField:
    """Samples of a chart-coordinate metric tensor on a set of nodes."""

    nodes: np.ndarray
    values: np.ndarray
    inverse: np.ndarray
    sqrt_det: np.ndarray

    @classmethod
    def from_values(cls, nodes, values, check: bool = True) -> "MetricField":
        values = 0.5 * (values + np.swapaxes(values, -1, -2))
        if check:
            eig = np.linalg.eigvalsh(values)
            if np.any(eig[:, 0] < SPD_MIN_EIGENVALUE):
                raise NumericalError(
                    "pulled-back metric lost positive definiteness", float(eig[:, 0].min())
                )
        return cls(nodes, values, np.linalg.inv(values), np.sqrt(np.linalg.det(values)))


def pullback_metric_at(chart: NormalChart, xi, J=None) -> np.ndarray:
    xi = _as_batch(xi, chart.model.dimension)
    if J is None:
        J = chart.jacobian(xi)
    g = chart.model.ambient_metric(chart.forward(xi))
    return np.einsum("mdn,mde,mek->mnk", J, g, J)


def pullback_metric(chart: NormalChart, grid) -> MetricField:
    """Pull the model metric back to chart coordinates on ``grid`` nodes."""
    nodes = grid.nodes if hasattr(grid, "nodes") else np.asarray(grid, dtype=float)
    return MetricField.from_values(nodes, pullback_metric_at(chart, nodes))


def metric_derivatives(chart: NormalChart, xi, h: float = JACOBIAN_STEP) -> np.ndarray:
    """Central differences of the pulled-back metric, shape ``(m, N, N, N)``."""
    xi = _as_batch(xi, chart.model.dimension)
    N = chart.model.dimension
    out = np.empty((len(xi), N, N, N))
    for a in range(N):
        e = np.zeros(N)
        e[a] = h
        out[..., a] = (pullback_metric_at(chart, xi + e) - pullback_metric_at(chart, xi - e)) / (2 * h)
    return out


def transition_derivative_bounds(
    model: ManifoldModel, charts: list[NormalChart], radius: float, n_samples: int = 200, seed: int = 0
):
    """Sampled sup of first and second derivatives of ``e_y^{-1} o e_x`` over
    ordered chart pairs whose balls of ``radius`` meet.

    Returns ``(C1, C2)``; these are the bounded-geometry surrogate constants.
    """
    rng = np.random.default_rng(seed)
    N = model.dimension
    c1 = c2 = 0.0
    h = 1e-3
    for cx in charts:
        for cy in charts:
            if cx is cy or model.distance(cx.center, cy.center)[0] >= 2 * radius:
                continue
            xi = rng.uniform(-radius, radius, size=(4 * n_samples, N))
            xi = xi[np.linalg.norm(xi, axis=1) < radius][:n_samples]
            X = cx.forward(xi)
            near = model.distance(X, cy.center) < radius
            xi = xi[near]
            if len(xi) == 0:
                continue

            def psi(z):
                return cy.inverse(cx.forward(z))

            for a in range(N):
                e = np.zeros(N)
                e[a] = h
                p, m0, q = psi(xi + e), psi(xi), psi(xi - e)
                c1 = max(c1, float(np.max(np.abs(p - q)) / (2 * h)))
                c2 = max(c2, float(np.max(np.abs(p - 2 * m0 + q)) / h**2))
    return c1, c2


def build_model(kind: str, dimension: int, perturbation: dict | None = None) -> ManifoldModel:
    """Construct a model manifold from its configuration fields."""
    if kind == "euclidean":
        return EuclideanModel(dimension)
    if kind == "hyperbolic":
        return HyperbolicModel(dimension)
    if kind == "perturbed-euclidean":
        if perturbation is None:
            raise GeometryError("perturbed-euclidean model needs a perturbation")
        center = perturbation.get("center") or [0.0] * dimension
        bump = MetricBump(tuple(center), perturbation["radius"], perturbation["amplitude"])
        return PerturbedEuclideanModel(dimension, bump)
    raise GeometryError(f"unknown manifold kind {kind!r}")
