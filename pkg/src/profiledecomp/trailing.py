"""Trailing systems of net points around a diverging core and their tail limits.

Limits are represented by tail averages: the limit of ``k -> F_k(xi)`` is
estimated by the mean of ``F_k(xi)`` over the last quarter of the retained
indices, which can be evaluated exactly at any chart point. Convergence is
judged by the spread of consecutive tail estimates on a sample grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covering import DiscreteNet, PartitionOfUnity, QuadratureGrid
from .geometry import EuclideanModel, NormalChart, NumericalError, pullback_metric_at

MIN_RETAINED = 8
DIST_DIGITS = 9


class StabilizationError(NumericalError):
    """Too few indices share the intersection pattern of the final index."""


def ordered_neighbors(net: DiscreteNet, core, count: int) -> np.ndarray:
    """The ``count`` net points nearest to ``core``, by distance then coordinates."""
    core = np.asarray(core, dtype=float)
    r = 2.0 * net.separation
    while True:
        cand = net.within(core, r)
        if len(cand) >= count or len(cand) == len(net):
            break
        r *= 1.5
    if len(cand) < count:
        raise NumericalError(f"net has fewer than {count} points near the core")
    d = np.round(net.model.distance(net.centers[cand], core), DIST_DIGITS)
    keys = [tuple(np.round(net.centers[c], DIST_DIGITS)) for c in cand]
    order = sorted(range(len(cand)), key=lambda a: (d[a], keys[a]))
    return cand[np.array(order[:count])]


@dataclass
class TrailingSystem:
    """Net indices ``order[k][i]`` of ``y_{k;i}`` for ``i = 0..i_max``."""

    net: DiscreteNet
    ks: list[int]
    order: dict[int, np.ndarray]
    i_max: int
    rho: float
    retained: list[int] = field(default_factory=list)
    patterns: dict[int, tuple] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.i_max + 1

    def point(self, k: int, i: int) -> np.ndarray:
        return self.net.centers[self.order[k][i]]

    def chart(self, k: int, i: int) -> NormalChart:
        return self.net.chart(int(self.order[k][i]))

    def pattern(self, k: int) -> tuple:
        if k not in self.patterns:
            pts = self.net.centers[self.order[k]]
            rows = []
            for i in range(self.size):
                d = self.net.model.distance(pts, pts[i])
                rows.append(tuple(np.nonzero(d < 2 * self.rho)[0].tolist()))
            self.patterns[k] = tuple(rows)
        return self.patterns[k]

    def intersections(self, i: int) -> tuple[int, ...]:
        """``J_i`` on the retained indices."""
        return self.pattern(self.retained[-1] if self.retained else self.ks[-1])[i]

    def tail(self) -> list[int]:
        ks = self.retained if self.retained else self.ks
        return ks[len(ks) - max(2, len(ks) // 4):]

    def complete(self, i: int) -> bool:
        """True if every net point within ``2 rho`` of ``y_{k;i}`` is in the system
        for all tail indices, so partition sums over the system are exact."""
        for k in self.tail():
            near = set(self.net.within(self.point(k, i), 2 * self.rho).tolist())
            if not near <= set(self.order[k].tolist()):
                return False
        return True


def build_trailing_system(net: DiscreteNet, core, i_max: int = 12, ks=None) -> TrailingSystem:
    """Order net points by distance to the core point of each index.

    ``core`` is a mapping or sequence giving one point per index in ``ks``.
    """
    if ks is None:
        ks = list(range(1, len(core) + 1))
    ks = [int(k) for k in ks]
    pts = core if isinstance(core, dict) else dict(zip(ks, core))
    order = {k: ordered_neighbors(net, pts[k], i_max + 1) for k in ks}
    return TrailingSystem(net, ks, order, i_max, net.rho)


def stabilize_intersections(ts: TrailingSystem, min_retained: int = MIN_RETAINED) -> TrailingSystem:
    """Retain the indices whose intersection pattern equals that of the last index."""
    final = ts.pattern(ts.ks[-1])
    retained = [k for k in ts.ks if ts.pattern(k) == final]
    if len(retained) < min_retained:
        raise StabilizationError(
            f"only {len(retained)} indices share the final intersection pattern "
            f"(need {min_retained})"
        )
    ts.retained = retained
    return ts


def _solve_chart_differential(chart: NormalChart, z, J_other):
    """Differential of ``e^{-1}`` at ``e(z)`` applied to the columns of ``J_other``."""
    if isinstance(chart.model, EuclideanModel):
        return np.einsum("dn,mdk->mnk", chart.basis, J_other)
    J = chart.jacobian(z)
    A = chart.model.projection_form()
    AJ = np.einsum("de,men->mdn", A, J)
    G = np.einsum("mdn,mdk->mnk", J, AJ)
    rhs = np.einsum("mdn,mdk->mnk", AJ, J_other)
    return np.linalg.solve(G, rhs)


def transition_terms(ts: TrailingSystem, i: int, j: int, k: int, xi: np.ndarray, with_jacobian: bool = False):
    """``e_{y_{k;i}}^{-1} o e_{y_{k;j}}`` at ``xi`` (and optionally its differential)."""
    ci, cj = ts.chart(k, i), ts.chart(k, j)
    X = cj.forward(xi)
    z = ci.inverse(X)
    if not with_jacobian:
        return z
    Jj = cj.jacobian(xi)
    return z, _solve_chart_differential(ci, z, Jj)


@dataclass
class TransitionMapEstimate:
    """Tail-averaged estimate of ``psi_ij`` from chart ``j`` into chart ``i``."""

    system: TrailingSystem
    i: int
    j: int
    samples: np.ndarray
    nodes: np.ndarray
    residual: float
    oscillation: float
    converged: bool

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        xi = np.atleast_2d(xi)
        if self.i == self.j:
            return np.array(xi, dtype=float)
        tail = self.system.tail()
        return sum(transition_terms(self.system, self.i, self.j, k, xi) for k in tail) / len(tail)

    def with_jacobian(self, xi: np.ndarray):
        xi = np.atleast_2d(xi)
        if self.i == self.j:
            N = xi.shape[1]
            return np.array(xi, dtype=float), np.broadcast_to(np.eye(N), (len(xi), N, N)).copy()
        tail = self.system.tail()
        zs, Ds = zip(*(transition_terms(self.system, self.i, self.j, k, xi, True) for k in tail))
        return sum(zs) / len(tail), sum(Ds) / len(tail)


def estimate_transition_limits(ts: TrailingSystem, grid: QuadratureGrid, tol: float = 1e-6) -> dict:
    """Transition limits ``psi_ij`` for all ``j in J_i`` on the retained indices.

    Samples are taken on ``grid`` nodes of chart ``j`` whose images land in the
    ``rho``-ball of chart ``i`` at the final index. ``residual`` is the sup
    difference of consecutive tail estimates; ``oscillation`` is the spread
    over all retained indices.
    """
    if not ts.retained:
        raise NumericalError("stabilize the trailing system first")
    out = {}
    tail = ts.tail()
    for i in range(ts.size):
        for j in ts.intersections(i):
            nodes = grid.nodes
            if i == j:
                out[(i, j)] = TransitionMapEstimate(ts, i, j, nodes.copy(), nodes, 0.0, 0.0, True)
                continue
            last = transition_terms(ts, i, j, ts.retained[-1], nodes)
            keep = np.linalg.norm(last, axis=1) < ts.rho
            sub = nodes[keep]
            if len(sub) == 0:
                continue
            series = {k: transition_terms(ts, i, j, k, sub) for k in ts.retained}
            tail_vals = [series[k] for k in tail]
            residual = max(
                float(np.max(np.abs(b - a))) for a, b in zip(tail_vals[:-1], tail_vals[1:])
            )
            allv = np.array(list(series.values()))
            osc = float(np.max(allv.max(axis=0) - allv.min(axis=0)))
            est = np.mean(tail_vals, axis=0)
            out[(i, j)] = TransitionMapEstimate(ts, i, j, est, sub, residual, osc, residual <= tol)
    return out


@dataclass
class LimitMetric:
    """Tail-averaged pulled-back metric of chart ``i``."""

    system: TrailingSystem
    i: int
    residual: float
    converged: bool
    flatness: float

    def __call__(self, xi: np.ndarray) -> np.ndarray:
        xi = np.atleast_2d(xi)
        tail = self.system.tail()
        return sum(pullback_metric_at(self.system.chart(k, self.i), xi) for k in tail) / len(tail)


def estimate_limit_metric(ts: TrailingSystem, i: int, grid: QuadratureGrid, tol: float = 1e-6) -> LimitMetric:
    tail = ts.tail()
    vals = [pullback_metric_at(ts.chart(k, i), grid.nodes) for k in tail]
    residual = max(float(np.max(np.abs(b - a))) for a, b in zip(vals[:-1], vals[1:]))
    mean = np.mean(vals, axis=0)
    eig = np.linalg.eigvalsh(0.5 * (mean + np.swapaxes(mean, 1, 2)))
    if np.any(eig[:, 0] < 0.5):
        raise NumericalError("limit metric is not uniformly positive definite", float(eig[:, 0].min()))
    flat = float(np.max(np.abs(mean - np.eye(grid.dimension))))
    return LimitMetric(ts, i, residual, residual <= tol, flat)


@dataclass
class LimitPartition:
    """Tail-averaged ``eta_i = lim chi_{y_{k;i}} o e_{y_{k;i}}`` with chart gradients."""

    system: TrailingSystem
    pu: PartitionOfUnity
    i: int

    def __call__(self, xi: np.ndarray):
        xi = np.atleast_2d(xi)
        tail = self.system.tail()
        val = np.zeros(len(xi))
        grad = np.zeros_like(xi, dtype=float)
        for k in tail:
            chart = self.system.chart(k, self.i)
            X = chart.forward(xi)
            v, g = self.pu.chi(int(self.system.order[k][self.i]), X)
            if isinstance(chart.model, EuclideanModel):
                gc = g @ chart.basis
            else:
                gc = np.einsum("md,mdn->mn", g, chart.jacobian(xi))
            val += v
            grad += gc
        return val / len(tail), grad / len(tail)


def estimate_limit_partition(pu: PartitionOfUnity, ts: TrailingSystem, i: int) -> LimitPartition:
    return LimitPartition(ts, pu, i)


def partition_sum_residual(
    ts: TrailingSystem, transitions: dict, partitions: list[LimitPartition], grid: QuadratureGrid
) -> float:
    """``sup |sum_j eta_j o psi_ji - 1|`` over complete charts of the system."""
    worst = 0.0
    for i in range(ts.size):
        if not ts.complete(i):
            continue
        xi = grid.nodes
        total = np.zeros(len(xi))
        for j in ts.intersections(i):
            psi = transitions.get((j, i))
            if psi is None:
                continue
            z = psi(xi)
            inside = np.linalg.norm(z, axis=1) < ts.rho
            if np.any(inside):
                total[inside] += partitions[j](z[inside])[0]
        worst = max(worst, float(np.max(np.abs(total - 1.0))))
    return worst


def cocycle_residual(ts: TrailingSystem, transitions: dict, grid: QuadratureGrid) -> float:
    """``sup |psi_li - psi_lj o psi_ji|`` over sampled triple overlaps in chart ``i``."""
    worst = 0.0
    rho = ts.rho
    for i in range(ts.size):
        Ji = ts.intersections(i)
        for j in Ji:
            if j == i or (j, i) not in transitions:
                continue
            zj = transitions[(j, i)](grid.nodes)
            in_ij = np.linalg.norm(zj, axis=1) < rho
            for l in Ji:
                if l in (i, j) or (l, i) not in transitions or (l, j) not in transitions:
                    continue
                zl = transitions[(l, i)](grid.nodes)
                mask = in_ij & (np.linalg.norm(zl, axis=1) < rho)
                if not np.any(mask):
                    continue
                comp = transitions[(l, j)](zj[mask])
                worst = max(worst, float(np.max(np.abs(comp - zl[mask]))))
    return worst


def metric_compatibility_residual(
    ts: TrailingSystem, transitions: dict, metrics: list[LimitMetric], grid: QuadratureGrid
) -> float:
    """``sup |g_i - dpsi_ji^T g_j(psi_ji) dpsi_ji|`` over sampled overlaps."""
    worst = 0.0
    for i in range(ts.size):
        Gi = metrics[i](grid.nodes)
        for j in ts.intersections(i):
            if j == i or (j, i) not in transitions:
                continue
            z, D = transitions[(j, i)].with_jacobian(grid.nodes)
            mask = np.linalg.norm(z, axis=1) < ts.rho
            if not np.any(mask):
                continue
            Gj = metrics[j](z[mask])
            pulled = np.einsum("mai,mab,mbj->mij", D[mask], Gj, D[mask])
            worst = max(worst, float(np.max(np.abs(pulled - Gi[mask]))))
    return worst
