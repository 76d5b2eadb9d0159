"""Discretizations, uniformly locally finite covers and partitions of unity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    GeometryError,
    HyperbolicModel,
    ManifoldModel,
    NormalChart,
    make_normal_chart,
)

CANDIDATE_REFINEMENT = 8
SMOOTHSTEP_PLATEAU = 0.6


class CoverError(ValueError):
    """Separation or covering requirements of a net are not met."""


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float


def smoothstep_bump(t):
    """C^2 radial template: 1 on ``[0, 0.6]``, 0 on ``[1, inf)``, quintic between.

    Returns the value and its first two derivatives in ``t``.
    """
    t = np.asarray(t, dtype=float)
    s = np.clip((t - SMOOTHSTEP_PLATEAU) / (1.0 - SMOOTHSTEP_PLATEAU), 0.0, 1.0)
    scale = 1.0 / (1.0 - SMOOTHSTEP_PLATEAU)
    b = 1.0 - s**3 * (10.0 - 15.0 * s + 6.0 * s * s)
    db = -30.0 * s * s * (1.0 - s) ** 2 * scale
    d2b = -60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) * scale**2
    return b, db, d2b


def _region_candidates(model: ManifoldModel, region: list[Ball], spacing: float) -> np.ndarray:
    pts = []
    N = model.dimension
    for ball in region:
        if isinstance(model, HyperbolicModel):
            stretch = np.sinh(ball.radius) / ball.radius
        else:
            stretch = 1.0
        h = spacing / stretch
        n = int(np.ceil(ball.radius / h))
        axis = np.arange(-n, n + 1) * h
        xi = np.stack(np.meshgrid(*([axis] * N), indexing="ij"), axis=-1).reshape(-1, N)
        xi = xi[np.linalg.norm(xi, axis=1) < ball.radius]
        c = np.asarray(ball.center, dtype=float)
        pts.append(model.exp(c, model.canonical_frame(c), xi))
    return np.vstack(pts)


def region_contains(model: ManifoldModel, region: list[Ball], X: np.ndarray) -> np.ndarray:
    mask = np.zeros(len(X), dtype=bool)
    for ball in region:
        mask |= model.distance(X, np.asarray(ball.center, dtype=float)) < ball.radius
    return mask


class DiscreteNet:
    """A separated, covering family of centres ``Y`` with cached charts."""

    def __init__(
        self,
        model: ManifoldModel,
        centers: np.ndarray,
        separation: float,
        cover_radius: float,
        rho: float,
        region: list[Ball],
        policy: str = "greedy",
        frame_seed: int | None = None,
        lattice: dict | None = None,
    ):
        self.model = model
        self.centers = np.asarray(centers, dtype=float)
        self.separation = float(separation)
        self.cover_radius = float(cover_radius)
        self.rho = float(rho)
        self.region = region
        self.policy = policy
        self.frame_seed = frame_seed
        self.lattice = lattice
        self._tree = cKDTree(self.centers) if model.ambient_lower_bound else None
        self._charts: dict[int, NormalChart] = {}
        self._neighbors: dict[tuple[int, float], np.ndarray] = {}
        self._lattice_index: dict[tuple, int] | None = None
        if lattice is not None:
            keys = np.rint((self.centers - lattice["origin"]) / lattice["spacing"]).astype(int)
            self._lattice_index = {tuple(k): i for i, k in enumerate(keys)}

    def __len__(self) -> int:
        return len(self.centers)

    def chart(self, idx: int) -> NormalChart:
        """Normal chart of radius ``2 rho`` at centre ``idx``."""
        chart = self._charts.get(idx)
        if chart is None:
            chart = make_normal_chart(self.model, self.centers[idx], 2 * self.rho, self.frame_seed)
            self._charts[idx] = chart
        return chart

    def within(self, x, r: float, conservative: bool = False) -> np.ndarray:
        """Indices of centres at geodesic distance < r from ``x``, sorted.

        With ``conservative=True`` the result may include extra centres (those
        within ambient distance ``r`` when that bounds the geodesic distance).
        """
        x = np.asarray(x, dtype=float)
        if self._tree is not None:
            cand = np.asarray(self._tree.query_ball_point(x, r), dtype=int)
            if conservative:
                return np.sort(cand)
        else:
            cand = np.arange(len(self.centers))
        if len(cand) == 0:
            return cand
        d = self.model.distance(self.centers[cand], x)
        return np.sort(cand[d < r])

    def neighbors(self, idx: int, r: float) -> np.ndarray:
        key = (idx, r)
        if key not in self._neighbors:
            self._neighbors[key] = self.within(self.centers[idx], r)
        return self._neighbors[key]

    def nearest(self, X: np.ndarray, k: int = 1):
        """Distances and indices of the ``k`` nearest centres to each row of ``X``."""
        X = np.atleast_2d(X)
        if self._tree is not None and k == 1:
            # Ambient distance is a lower bound: search a generous candidate set.
            ed, ei = self._tree.query(X, k=min(len(self.centers), 8))
            ed = np.atleast_2d(ed)
            ei = np.atleast_2d(ei)
            best_d = np.full(len(X), np.inf)
            best_i = np.zeros(len(X), dtype=int)
            for j in range(ei.shape[1]):
                d = self.model.distance(X, self.centers[ei[:, j]])
                better = d < best_d
                best_d = np.where(better, d, best_d)
                best_i = np.where(better, ei[:, j], best_i)
            return best_d, best_i
        D = np.stack([self.model.distance(X, c) for c in self.centers], axis=1)
        order = np.argsort(D, axis=1, kind="stable")[:, :k]
        dist = np.take_along_axis(D, order, axis=1)
        if k == 1:
            return dist[:, 0], order[:, 0]
        return dist, order

    def index_of(self, point, tol: float = 1e-9) -> int:
        d, i = self.nearest(np.atleast_2d(point))
        if d[0] > tol:
            raise CoverError("point is not a centre of the net")
        return int(i[0])

    def lattice_key(self, idx: int) -> tuple | None:
        if self.lattice is None:
            return None
        return tuple(np.rint((self.centers[idx] - self.lattice["origin"]) / self.lattice["spacing"]).astype(int))

    def check_cover(self, samples: np.ndarray) -> float:
        """Largest distance from a sample point to its nearest centre."""
        d, _ = self.nearest(samples)
        return float(d.max())


def dense_samples(model: ManifoldModel, region: list[Ball], n: int, seed: int = 0) -> np.ndarray:
    """Points drawn uniformly in normal coordinates over the region balls."""
    rng = np.random.default_rng(seed)
    N = model.dimension
    per = int(np.ceil(n / len(region)))
    out = []
    for ball in region:
        dirs = rng.standard_normal((per, N))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rad = ball.radius * rng.uniform(0, 1, per) ** (1.0 / N)
        c = np.asarray(ball.center, dtype=float)
        out.append(model.exp(c, model.canonical_frame(c), dirs * rad[:, None]))
    return np.vstack(out)[:n]


def build_net(
    model: ManifoldModel,
    region: list[Ball],
    rho: float,
    rho_hat: float,
    seed: int = 0,
    policy: str = "greedy",
    lattice_origin=None,
    frame_seed: int | None = None,
) -> DiscreteNet:
    """Build a ``rho_hat``-separated net covering ``region`` with radius ``rho_hat < rho``.

    ``policy="greedy"`` runs farthest-point insertion on a candidate lattice of
    spacing ``rho_hat / 8``, starting from a seeded candidate. ``policy="lattice"``
    (Euclidean-type models only) uses the coordinate lattice ``rho_hat * Z^N``
    shifted to ``lattice_origin``.
    """
    if not rho / 2 < rho_hat < rho:
        raise CoverError(f"need rho/2 < rho_hat < rho, got rho_hat={rho_hat}, rho={rho}")
    if not rho < model.injectivity_floor / 8:
        raise CoverError(
            f"rho={rho} must be below one eighth of the injectivity floor "
            f"({model.injectivity_floor:.4g})"
        )
    region = [Ball(np.asarray(b.center, dtype=float), float(b.radius)) for b in region]
    if policy == "lattice":
        return _lattice_net(model, region, rho, rho_hat, lattice_origin, frame_seed)
    if policy != "greedy":
        raise CoverError(f"unknown net policy {policy!r}")
    cand = _region_candidates(model, region, rho_hat / CANDIDATE_REFINEMENT)
    rng = np.random.default_rng(seed)
    first = int(rng.integers(len(cand)))
    chosen = [first]
    mind = model.distance(cand, cand[first])
    use_bound = model.ambient_lower_bound
    while True:
        j = int(np.argmax(mind))
        if mind[j] < rho_hat:
            break
        chosen.append(j)
        if use_bound:
            # Geodesic distance is at least the ambient one: skip far candidates.
            amb = np.linalg.norm(cand - cand[j], axis=1)
            near = np.nonzero(amb < mind)[0]
            mind[near] = np.minimum(mind[near], model.distance(cand[near], cand[j]))
        else:
            mind = np.minimum(mind, model.distance(cand, cand[j]))
    centers = cand[chosen]
    return DiscreteNet(model, centers, rho_hat, rho_hat, rho, region, "greedy", frame_seed)


def _lattice_net(model, region, rho, spacing, origin, frame_seed) -> DiscreteNet:
    if not model.ambient_lower_bound:
        raise CoverError("lattice nets need a model with Euclidean coordinates")
    N = model.dimension
    origin = np.zeros(N) if origin is None else np.asarray(origin, dtype=float)
    keys = set()
    for ball in region:
        reach = ball.radius + rho
        lo = np.floor((ball.center - reach - origin) / spacing).astype(int)
        hi = np.ceil((ball.center + reach - origin) / spacing).astype(int)
        axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, N)
        pts = origin + grid * spacing
        inside = np.linalg.norm(pts - ball.center, axis=1) < reach
        keys.update(map(tuple, grid[inside]))
    grid = np.array(sorted(keys), dtype=float)
    centers = origin + grid * spacing
    cover = spacing * np.sqrt(N) / 2
    if cover >= rho:
        raise CoverError("lattice spacing too coarse to cover with radius rho")
    lattice = {"origin": origin, "spacing": spacing}
    return DiscreteNet(model, centers, spacing, cover, rho, region, "lattice", frame_seed, lattice)


def covering_multiplicity(net: DiscreteNet, r: float, samples: np.ndarray | None = None) -> int:
    """Maximum number of balls ``B(y, r)`` containing a common point.

    Evaluated on ``samples`` (defaults to the centres and dense region samples).
    """
    if samples is None:
        samples = np.vstack([net.centers, dense_samples(net.model, net.region, 4000, seed=1)])
    best = 0
    for x in samples:
        best = max(best, len(net.within(x, r)))
    return best


@dataclass
class PartitionOfUnity:
    """``chi_y(x) = b(d(x, y)/rho) / sum_y' b(d(x, y')/rho)``."""

    net: DiscreteNet
    rho: float
    _nbr: dict = field(default_factory=dict, repr=False)

    def chi(self, idx: int, X: np.ndarray):
        """Value and ambient differential of ``chi_idx`` at the rows of ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        m = len(X)
        val = np.zeros(m)
        grad = np.zeros((m, X.shape[1]))
        model = self.net.model
        mask = model.in_ball(X, self.net.centers[idx], self.rho)
        if not np.any(mask):
            return val, grad
        sel = np.nonzero(mask)[0]
        nbrs = self.net.neighbors(idx, 2 * self.rho)
        own = int(np.searchsorted(nbrs, idx))
        d, dd = model.distances_to_centers(self.net.centers[nbrs], X[sel], cutoff=self.rho)
        b, db, _ = smoothstep_bump(d / self.rho)
        db = db / self.rho
        total = b.sum(axis=1)
        dtotal = np.einsum("mn,mnd->md", db, dd)
        b0 = b[:, own]
        g0 = db[:, own, None] * dd[:, own]
        val[sel] = b0 / total
        grad[sel] = g0 / total[:, None] - (b0 / total**2)[:, None] * dtotal
        return val, grad

    def total(self, X: np.ndarray) -> np.ndarray:
        """``sum_y chi_y`` at the rows of ``X`` (should be 1 on the cover)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.zeros(len(X))
        for idx in range(len(self.net)):
            out += self.chi(idx, X)[0]
        return out

    def derivative_constants(self, idx: int, grid) -> tuple[float, float, float]:
        """Sampled sup of ``|chi|``, ``|d chi|`` and ``|d^2 chi|`` in the chart at ``idx``."""
        chart = self.net.chart(idx)
        nodes = grid.nodes
        h = 1e-4
        N = nodes.shape[1]

        def chart_grad(xi):
            X = chart.forward(xi)
            _, g = self.chi(idx, X)
            return np.einsum("md,mdn->mn", g, chart.jacobian(xi))

        X = chart.forward(nodes)
        v, _ = self.chi(idx, X)
        g0 = chart_grad(nodes)
        c2 = 0.0
        for a in range(N):
            e = np.zeros(N)
            e[a] = h
            col = (chart_grad(nodes + e) - chart_grad(nodes - e)) / (2 * h)
            c2 = max(c2, float(np.max(np.abs(col))))
        return float(np.max(np.abs(v))), float(np.max(np.linalg.norm(g0, axis=1))), c2


def build_partition_of_unity(model: ManifoldModel, net: DiscreteNet, template: str = "quintic") -> PartitionOfUnity:
    if template != "quintic":
        raise GeometryError(f"unknown partition template {template!r}")
    if net.model is not model:
        raise GeometryError("net was built on a different model")
    return PartitionOfUnity(net, net.rho)


@dataclass
class QuadratureGrid:
    """Quadrature on the Euclidean ball of radius ``radius`` in R^N.

    Gauss-Legendre in the radius (with the ``r^{N-1}`` Jacobian), uniform in
    angle; the weights sum to the exact ball volume. ``make_grid`` uses
    ``grid_res/4`` radial and ``grid_res/2`` angular nodes per axis.
    """

    dimension: int
    radius: float
    nodes: np.ndarray
    weights: np.ndarray
    resolution: int

    def __len__(self) -> int:
        return len(self.nodes)


def make_grid(dimension: int, radius: float, grid_res: int) -> QuadratureGrid:
    if grid_res < 4:
        raise GeometryError("grid_res must be at least 4")
    n_r = max(2, grid_res // 4)
    x, w = np.polynomial.legendre.leggauss(n_r)
    r = radius * (1 + x) / 2
    wr = w * radius / 2 * r ** (dimension - 1)
    if dimension == 2:
        n_t = max(4, grid_res // 2)
        th = 2 * np.pi * (np.arange(n_t) + 0.5) / n_t
        dirs = np.column_stack([np.cos(th), np.sin(th)])
        wd = np.full(n_t, 2 * np.pi / n_t)
    elif dimension == 3:
        n_t = max(4, grid_res // 2)
        ct, wc = np.polynomial.legendre.leggauss(max(2, grid_res // 4))
        ph = 2 * np.pi * (np.arange(n_t) + 0.5) / n_t
        st = np.sqrt(1 - ct**2)
        dirs = np.stack(
            [np.outer(st, np.cos(ph)), np.outer(st, np.sin(ph)), np.outer(ct, np.ones(n_t))], axis=-1
        ).reshape(-1, 3)
        wd = np.outer(wc, np.full(n_t, 2 * np.pi / n_t)).ravel()
    else:
        raise GeometryError("quadrature grids are implemented for dimensions 2 and 3")
    nodes = (r[:, None, None] * dirs[None, :, :]).reshape(-1, dimension)
    weights = np.outer(wr, wd).ravel()
    return QuadratureGrid(dimension, float(radius), nodes, weights, grid_res)


def cartesian_nodes(dimension: int, half_width: float, n: int) -> np.ndarray:
    """Regular ``n^N`` grid on ``[-half_width, half_width]^N``."""
    axis = np.linspace(-half_width, half_width, n)
    return np.stack(np.meshgrid(*([axis] * dimension), indexing="ij"), axis=-1).reshape(-1, dimension)
