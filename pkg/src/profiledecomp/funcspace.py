"""Functions on model manifolds and the L^p / H^{1,2} norms computed through charts."""

from __future__ import annotations

import weakref
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .covering import Ball, DiscreteNet, PartitionOfUnity, QuadratureGrid, make_grid, smoothstep_bump
from .geometry import EuclideanModel, ManifoldModel, NormalChart, NumericalError

MIN_TAIL = 8
VALUE_CACHE_BYTES = 300e6
CHART_CACHE_BYTES = 200e6


class ManifoldFunction:
    """A function on the model manifold with its ambient differential.

    ``support`` is a list of balls containing the support, or ``None`` when
    the support is not known.
    """

    support: list[Ball] | None = None

    def value_and_grad(self, X: np.ndarray):
        raise NotImplementedError

    def __call__(self, X):
        return self.value_and_grad(np.atleast_2d(X))[0]

    def __add__(self, other: "ManifoldFunction") -> "ManifoldFunction":
        return SumFunction([self, other], [1.0, 1.0])

    def __sub__(self, other: "ManifoldFunction") -> "ManifoldFunction":
        return SumFunction([self, other], [1.0, -1.0])

    def __mul__(self, c: float) -> "ManifoldFunction":
        return SumFunction([self], [float(c)])

    __rmul__ = __mul__


class ZeroFunction(ManifoldFunction):
    def __init__(self):
        self.support = []

    def value_and_grad(self, X):
        X = np.atleast_2d(X)
        return np.zeros(len(X)), np.zeros_like(X, dtype=float)


class Bump(ManifoldFunction):
    """``amplitude * (1 - d(x, center)^2 / radius^2)^power`` inside the ball."""

    def __init__(self, model: ManifoldModel, center, radius: float, amplitude: float = 1.0, power: int = 4):
        self.model = model
        self.center = np.asarray(center, dtype=float)
        self.radius = float(radius)
        self.amplitude = float(amplitude)
        self.power = int(power)
        self.support = [Ball(self.center, self.radius)]

    def value_and_grad(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        val = np.zeros(len(X))
        grad = np.zeros_like(X)
        mask = self.model.in_ball(X, self.center, self.radius)
        if not np.any(mask):
            return val, grad
        d, dd = self.model.distance_and_differential(self.center, X[mask])
        s = np.clip(1.0 - (d / self.radius) ** 2, 0.0, None)
        m = self.power
        val[mask] = self.amplitude * s**m
        coef = self.amplitude * m * s ** (m - 1) * (-2.0 * d / self.radius**2)
        grad[mask] = coef[:, None] * dd
        return val, grad


class Oscillation(ManifoldFunction):
    """``bump(x) * sin(freq * <x - center, direction>) / freq`` in Euclidean coordinates."""

    def __init__(self, bump: Bump, frequency: float, direction):
        self.bump = bump
        self.frequency = float(frequency)
        self.direction = np.asarray(direction, dtype=float)
        self.direction = self.direction / np.linalg.norm(self.direction)
        self.support = bump.support

    def value_and_grad(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        b, db = self.bump.value_and_grad(X)
        phase = self.frequency * (X - self.bump.center) @ self.direction
        s, c = np.sin(phase), np.cos(phase)
        val = b * s / self.frequency
        grad = db * (s / self.frequency)[:, None] + (b * c)[:, None] * self.direction
        return val, grad


def _union_support(funcs) -> list[Ball] | None:
    out: list[Ball] = []
    for f in funcs:
        if f.support is None:
            return None
        out.extend(f.support)
    return out


class SumFunction(ManifoldFunction):
    def __init__(self, terms, coefficients):
        self.terms = list(terms)
        self.coefficients = [float(c) for c in coefficients]
        self.support = _union_support(self.terms)

    def value_and_grad(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        val = np.zeros(len(X))
        grad = np.zeros_like(X)
        for f, c in zip(self.terms, self.coefficients):
            v, g = f.value_and_grad(X)
            val += c * v
            grad += c * g
        return val, grad


class TailAverage(ManifoldFunction):
    """Pointwise mean of a list of functions."""

    def __init__(self, terms):
        self.terms = list(terms)
        self.support = _union_support(self.terms)

    def value_and_grad(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        val = np.zeros(len(X))
        grad = np.zeros_like(X)
        for f in self.terms:
            v, g = f.value_and_grad(X)
            val += v
            grad += g
        n = len(self.terms)
        return val / n, grad / n


class Windowed(ManifoldFunction):
    """``(sum_{y in window} chi_y) * base``."""

    def __init__(self, base: ManifoldFunction, pu: PartitionOfUnity, centers):
        self.base = base
        self.pu = pu
        self.centers = [int(c) for c in centers]
        net = pu.net
        self.support = [Ball(net.centers[c], pu.rho) for c in self.centers]

    def value_and_grad(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        val = np.zeros(len(X))
        grad = np.zeros_like(X)
        # The base is cheap next to the partition weights: weigh only where it lives.
        b, db = self.base.value_and_grad(X)
        live = np.nonzero((b != 0) | np.any(db != 0, axis=1))[0]
        if len(live):
            Xl = X[live]
            w = np.zeros(len(live))
            dw = np.zeros_like(Xl)
            for c in self.centers:
                v, g = self.pu.chi(c, Xl)
                w += v
                dw += g
            val[live] = w * b[live]
            grad[live] = w[:, None] * db[live] + dw * b[live, None]
        return val, grad


@dataclass
class ChartFunction:
    """Samples of a function on chart quadrature nodes, with an optional exact evaluator.

    The evaluator maps chart coordinates ``(m, N)`` to values and chart gradients.
    """

    grid: QuadratureGrid
    values: np.ndarray
    grads: np.ndarray | None = None
    evaluator: Callable | None = None

    def __call__(self, xi):
        if self.evaluator is None:
            raise NumericalError("chart function has no off-grid evaluator")
        return self.evaluator(np.atleast_2d(xi))


def chart_pullback(f: ManifoldFunction, chart: NormalChart, xi: np.ndarray):
    """Values and chart gradients of ``f o e`` at chart coordinates ``xi``."""
    xi = np.atleast_2d(xi)
    X = chart.forward(xi)
    v, g = f.value_and_grad(X)
    if isinstance(chart.model, EuclideanModel):
        return v, g @ chart.basis
    J = chart.jacobian(xi)
    return v, np.einsum("md,mdn->mn", g, J)


@dataclass
class ChartData:
    X: np.ndarray
    J: np.ndarray | None
    ginv: np.ndarray | None
    vol: np.ndarray  # quadrature weight times sqrt(det g)
    chi: np.ndarray
    dchi: np.ndarray  # chart gradient of chi


class Integrator:
    """Chart-wise quadrature of norms over a net with a partition of unity.

    Chart geometry (nodes, Jacobians, metric, partition values) is cached per
    centre; the cache is bounded to keep memory predictable.
    """

    def __init__(self, net: DiscreteNet, pu: PartitionOfUnity, grid_res: int = 64, cache_size: int | None = None):
        self.net = net
        self.pu = pu
        self.model = net.model
        self.rho = net.rho
        self.grid_res = grid_res
        self.grid = make_grid(self.model.dimension, self.rho, grid_res)
        self.flat = isinstance(self.model, EuclideanModel)
        self._cache: OrderedDict[int, ChartData] = OrderedDict()
        if cache_size is None:
            D = len(self.model.origin())
            N = self.model.dimension
            per_chart = len(self.grid) * (D + D * N + N * N + 2 * N + 2) * 8
            cache_size = max(512, int(CHART_CACHE_BYTES / per_chart))
        self.cache_size = cache_size
        # Leaf evaluations keyed by (id(f), centre); the entry keeps f alive so
        # the id cannot be reused while cached.
        self._values: OrderedDict[tuple[int, int], tuple] = OrderedDict()
        self.value_cache_size = max(64, int(VALUE_CACHE_BYTES / (len(self.grid) * (self.model.dimension + 1) * 8)))

    def chart_data(self, idx: int) -> ChartData:
        data = self._cache.get(idx)
        if data is not None:
            self._cache.move_to_end(idx)
            return data
        chart = self.net.chart(idx)
        nodes = self.grid.nodes
        X = chart.forward(nodes)
        chi, dchi = self.pu.chi(idx, X)
        if self.flat:
            J = ginv = None
            vol = self.grid.weights.copy()
            dchi_c = dchi @ chart.basis
        else:
            J = chart.jacobian(nodes)
            g = self.model.ambient_metric(X)
            G = np.einsum("mdn,mde,mek->mnk", J, g, J)
            ginv = np.linalg.inv(G)
            vol = self.grid.weights * np.sqrt(np.linalg.det(G))
            dchi_c = np.einsum("md,mdn->mn", dchi, J)
        data = ChartData(X, J, ginv, vol, chi, dchi_c)
        self._cache[idx] = data
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return data

    def centers_for(self, f: ManifoldFunction) -> np.ndarray:
        """Centres whose partition function can meet the support of ``f``."""
        if f.support is None:
            return np.arange(len(self.net))
        idx: set[int] = set()
        for ball in f.support:
            idx.update(self.net.within(ball.center, ball.radius + self.rho, conservative=True).tolist())
        return np.array(sorted(idx), dtype=int)

    def evaluate(self, f: ManifoldFunction, centers) -> list[tuple[np.ndarray, np.ndarray]]:
        """Values and chart gradients of ``f`` on each chart of ``centers``.

        Sums and averages are expanded so that each term is evaluated only on
        the charts its support can reach.
        """
        centers = [int(c) for c in centers]
        if not centers:
            return []
        m = len(self.grid)
        N = self.model.dimension
        if isinstance(f, (SumFunction, TailAverage)):
            if isinstance(f, SumFunction):
                weights = f.coefficients
            else:
                weights = [1.0 / len(f.terms)] * len(f.terms)
            vals = np.zeros((len(centers), m))
            grads = np.zeros((len(centers), m, N))
            pos = {c: j for j, c in enumerate(centers)}
            for term, w in zip(f.terms, weights):
                reach = set(self.centers_for(term).tolist())
                sub = [c for c in centers if c in reach]
                for c, (v, g) in zip(sub, self.evaluate(term, sub)):
                    vals[pos[c]] += w * v
                    grads[pos[c]] += w * g
            return list(zip(vals, grads))
        if isinstance(f, ZeroFunction):
            return [(np.zeros(m), np.zeros((m, N))) for _ in centers]
        fid = id(f)
        missing = [c for c in centers if (fid, c) not in self._values]
        if missing:
            data = [self.chart_data(c) for c in missing]
            X = np.vstack([d.X for d in data])
            v, g = f.value_and_grad(X)
            for j, (c, d) in enumerate(zip(missing, data)):
                vj, gj = v[j * m:(j + 1) * m], g[j * m:(j + 1) * m]
                if self.flat:
                    gc = gj @ self.net.chart(c).basis
                else:
                    gc = np.einsum("md,mdn->mn", gj, d.J)
                self._values[(fid, c)] = (f, vj, gc)
        out = []
        for c in centers:
            entry = self._values[(fid, c)]
            self._values.move_to_end((fid, c))
            out.append((entry[1], entry[2]))
        while len(self._values) > self.value_cache_size:
            self._values.popitem(last=False)
        return out

    def _energy_density(self, d: ChartData, ga, gb):
        if d.ginv is None:
            return np.sum(ga * gb, axis=1)
        return np.einsum("mi,mij,mj->m", ga, d.ginv, gb)

    def lp_power(self, f: ManifoldFunction, p: float, centers=None) -> float:
        centers = self.centers_for(f) if centers is None else centers
        total = 0.0
        for c, (v, _) in zip(centers, self.evaluate(f, centers)):
            d = self.chart_data(c)
            total += float(np.sum(d.chi * np.abs(v) ** p * d.vol))
        return total

    def lp_norm(self, f: ManifoldFunction, p: float) -> float:
        return self.lp_power(f, p) ** (1.0 / p)

    def h12_inner(self, f: ManifoldFunction, h: ManifoldFunction) -> float:
        if f is h:
            return self.h12_norm(f) ** 2
        cf = set(self.centers_for(f).tolist())
        ch = set(self.centers_for(h).tolist())
        centers = sorted(cf & ch)
        ef = self.evaluate(f, centers)
        eh = self.evaluate(h, centers)
        total = 0.0
        for c, (vf, gf), (vh, gh) in zip(centers, ef, eh):
            d = self.chart_data(c)
            dens = self._energy_density(d, gf, gh) + vf * vh
            total += float(np.sum(d.chi * dens * d.vol))
        return total

    def h12_norm(self, f: ManifoldFunction) -> float:
        centers = self.centers_for(f)
        total = 0.0
        for c, (v, g) in zip(centers, self.evaluate(f, centers)):
            d = self.chart_data(c)
            total += float(np.sum(d.chi * (self._energy_density(d, g, g) + v * v) * d.vol))
        return float(np.sqrt(max(total, 0.0)))

    def equivalent_norm(self, f: ManifoldFunction) -> float:
        """``(sum_y |(chi_y f) o e_y|^2_{H^{1,2}(flat)})^{1/2}``."""
        centers = self.centers_for(f)
        total = 0.0
        w = self.grid.weights
        for c, (v, g) in zip(centers, self.evaluate(f, centers)):
            d = self.chart_data(c)
            cv = d.chi * v
            cg = d.chi[:, None] * g + d.dchi * v[:, None]
            total += float(np.sum((np.sum(cg * cg, axis=1) + cv * cv) * w))
        return float(np.sqrt(total))

    def local_masses(self, f: ManifoldFunction, p: float, centers=None) -> tuple[np.ndarray, np.ndarray]:
        """``int_{B(y, rho)} |f|^p`` for each centre; returns (centres, masses)."""
        centers = self.centers_for(f) if centers is None else np.asarray(centers, dtype=int)
        masses = np.array(
            [float(np.sum(np.abs(v) ** p * self.chart_data(c).vol)) for c, (v, _) in zip(centers, self.evaluate(f, centers))]
        )
        return centers, masses

    def local_energies(self, f: ManifoldFunction, centers) -> np.ndarray:
        """``int chi_y (|df|^2 + f^2)`` for each centre."""
        out = []
        for c, (v, g) in zip(centers, self.evaluate(f, centers)):
            d = self.chart_data(c)
            out.append(float(np.sum(d.chi * (self._energy_density(d, g, g) + v * v) * d.vol)))
        return np.array(out)


_INTEGRATORS: "weakref.WeakKeyDictionary[DiscreteNet, dict]" = weakref.WeakKeyDictionary()


def integrator_for(net: DiscreteNet, pu: PartitionOfUnity, grid_res: int) -> Integrator:
    per_net = _INTEGRATORS.setdefault(net, {})
    key = (id(pu), grid_res)
    if key not in per_net:
        per_net[key] = Integrator(net, pu, grid_res)
    return per_net[key]


def lp_norm(model, f, net, pu, p: float, grid_res: int = 64) -> float:
    return integrator_for(net, pu, grid_res).lp_norm(f, p)


def h12_inner(model, f, h, net, pu, grid_res: int = 64) -> float:
    return integrator_for(net, pu, grid_res).h12_inner(f, h)


def h12_norm(model, f, net, pu, grid_res: int = 64) -> float:
    return integrator_for(net, pu, grid_res).h12_norm(f)


def equivalent_norm(model, f, net, pu, grid_res: int = 64) -> float:
    return integrator_for(net, pu, grid_res).equivalent_norm(f)


def norm_equivalence_constant(model, fs, net, pu, grid_res: int = 64) -> float:
    """Largest ratio between the two H^{1,2} norms, in either direction, over ``fs``."""
    integ = integrator_for(net, pu, grid_res)
    c = 1.0
    for f in fs:
        a, b = integ.h12_norm(f), integ.equivalent_norm(f)
        if a > 0 and b > 0:
            c = max(c, a / b, b / a)
    return c


def dictionary_functions(grid: QuadratureGrid, size: int = 16) -> np.ndarray:
    """C^2 test functions on the chart ball sampled at the grid nodes.

    Products of low-degree monomials in each coordinate with the radial
    smoothstep cutoff, in graded order; shape ``(size, m)``.
    """
    N = grid.dimension
    xi = grid.nodes / grid.radius
    cut, _, _ = smoothstep_bump(np.linalg.norm(xi, axis=1))
    idx = []
    degree = 0
    while len(idx) < size:
        for alpha in np.ndindex(*([degree + 1] * N)):
            if sum(alpha) == degree:
                idx.append(alpha)
        degree += 1
    idx = idx[:size]
    phis = [cut * np.prod([xi[:, a] ** e for a, e in enumerate(alpha)], axis=0) for alpha in idx]
    return np.array(phis)


def weak_limit_estimate(pullbacks: list[ChartFunction], dictionary_size: int = 16, tol: float = 1e-3):
    """Estimate the weak limit of chart pullbacks from the tail of the sequence.

    The residual is the spread of the pairings with the test dictionary over
    the last quarter of the sequence, normalized by the largest L^2 norms of
    the pullbacks and of the test functions. Returns
    ``(limit, converged, residual)``; the limit is the pointwise tail mean.
    """
    if len(pullbacks) < MIN_TAIL:
        raise NumericalError(f"need at least {MIN_TAIL} pullbacks, got {len(pullbacks)}")
    grid = pullbacks[0].grid
    tail = pullbacks[len(pullbacks) - max(2, len(pullbacks) // 4):]
    phis = dictionary_functions(grid, dictionary_size)
    w = grid.weights
    coef = np.array([phis @ (f.values * w) for f in tail])
    spread = np.max(coef.max(axis=0) - coef.min(axis=0))
    fnorm = max(np.sqrt(np.sum(f.values**2 * w)) for f in pullbacks)
    pnorm = np.max(np.sqrt(np.sum(phis**2 * w, axis=1)))
    residual = float(spread / (fnorm * pnorm)) if fnorm > 0 else 0.0
    values = np.mean([f.values for f in tail], axis=0)
    grads = None
    if all(f.grads is not None for f in tail):
        grads = np.mean([f.grads for f in tail], axis=0)
    evaluator = None
    if all(f.evaluator is not None for f in tail):
        evals = [f.evaluator for f in tail]

        def evaluator(xi):
            vs, gs = zip(*(e(xi) for e in evals))
            return np.mean(vs, axis=0), np.mean(gs, axis=0)

    limit = ChartFunction(grid, values, grads, evaluator)
    return limit, residual <= tol, residual


def pullback_chart_function(f: ManifoldFunction, chart: NormalChart, grid: QuadratureGrid) -> ChartFunction:
    v, g = chart_pullback(f, chart, grid.nodes)
    return ChartFunction(grid, v, g, lambda xi, f=f, chart=chart: chart_pullback(f, chart, xi))


@dataclass
class FunctionSequence:
    """A bounded sequence ``k -> u_k`` with ``k = 1..k_max`` and its provenance."""

    generator: Callable[[int], ManifoldFunction]
    k_max: int
    descriptor: dict
    norm_bound: float | None = None

    def __post_init__(self):
        self._cache: dict[int, ManifoldFunction] = {}

    def __getitem__(self, k: int) -> ManifoldFunction:
        if not 1 <= k <= self.k_max:
            raise IndexError(k)
        if k not in self._cache:
            self._cache[k] = self.generator(k)
        return self._cache[k]

    def __len__(self) -> int:
        return self.k_max

    def ks(self) -> range:
        return range(1, self.k_max + 1)
