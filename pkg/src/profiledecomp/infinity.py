"""Gluing data, the glued limit manifold and profiles defined on it."""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .covering import QuadratureGrid, cartesian_nodes
from .geometry import NumericalError

CONDITIONS = ("(1)", "(2)", "(3a)", "(3b)", "(3c)", "(4)", "(v)")
BISECTION_STEPS = 48
GLUED_FORMAT = "glued-manifold/1"


class GluingError(ValueError):
    """Gluing data violates one of the gluing conditions."""

    def __init__(self, message: str, report: "ValidationReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass
class GluingData:
    """Charts ``Omega_i = offsets[i] + B(0, rho)`` glued by transition maps.

    Maps and overlap predicates act on local coordinates (the offset removed).
    ``transitions[(i, j)]`` is ``psi_ij``, taking points of ``Omega_ji`` (in chart
    ``j``) to ``Omega_ij`` (in chart ``i``). When no explicit predicate is given,
    ``Omega_ij = {xi in B(0, rho): |psi_ji(xi)| < rho}``.
    """

    dimension: int
    rho: float
    offsets: np.ndarray
    transitions: dict = field(default_factory=dict)
    overlaps: dict = field(default_factory=dict)

    @property
    def n_charts(self) -> int:
        return len(self.offsets)

    def in_ball(self, xi) -> np.ndarray:
        return np.linalg.norm(np.atleast_2d(xi), axis=1) < self.rho

    def psi(self, i: int, j: int, xi) -> np.ndarray:
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        f = self.transitions.get((i, j))
        if f is None:
            if i == j:
                return xi.copy()
            raise GluingError(f"no transition map for ({i}, {j})")
        return np.atleast_2d(f(xi))

    def overlap(self, i: int, j: int, xi) -> np.ndarray:
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        pred = self.overlaps.get((i, j))
        if pred is not None:
            return np.asarray(pred(xi), dtype=bool)
        ball = self.in_ball(xi)
        if i == j:
            return ball
        if (j, i) not in self.transitions:
            return np.zeros(len(xi), dtype=bool)
        out = np.zeros(len(xi), dtype=bool)
        if np.any(ball):
            out[ball] = np.linalg.norm(self.psi(j, i, xi[ball]), axis=1) < self.rho
        return out

    def declared_pairs(self) -> list[tuple[int, int]]:
        keys = set(self.transitions) | set(self.overlaps)
        keys |= {(j, i) for (i, j) in keys}
        return sorted(k for k in keys if k[0] != k[1])


@dataclass
class ValidationReport:
    ok: bool
    failures: list[dict]
    residuals: dict

    @property
    def failed_conditions(self) -> list[str]:
        return [f["condition"] for f in self.failures]

    def to_dict(self) -> dict:
        return {"ok": self.ok, "failures": self.failures, "residuals": self.residuals}


def _bisect(data: GluingData, i: int, j: int, inside: np.ndarray, outside: np.ndarray) -> np.ndarray:
    a, b = inside.copy(), outside.copy()
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (a + b)
        m = data.overlap(i, j, mid)
        a[m] = mid[m]
        b[~m] = mid[~m]
    return a


def validate_gluing_data(data: GluingData, tol: float = 1e-8, n_check: int = 25) -> ValidationReport:
    """Check the gluing conditions on sampled points.

    Conditions are named ``(1)`` disjoint domains, ``(2)`` overlap structure,
    ``(3a)`` identity, ``(3b)`` inverses, ``(3c)`` cocycle and invertible
    differential, ``(4)`` the Hausdorff condition on overlap boundaries and
    ``(v)`` boundary points of an overlap map to the boundary of the ball.
    """
    rho = data.rho
    N = data.dimension
    box = cartesian_nodes(N, 1.05 * rho, n_check)
    ball = data.in_ball(box)
    samples = box[ball]
    res = {c: 0.0 for c in CONDITIONS}
    failures: list[dict] = []

    def fail(cond, msg, value):
        failures.append({"condition": cond, "message": msg, "residual": float(value)})

    # (1) the p-domains are pairwise disjoint.
    off = np.asarray(data.offsets, dtype=float)
    for i in range(len(off)):
        for j in range(i + 1, len(off)):
            gap = 2 * rho - np.linalg.norm(off[i] - off[j])
            res["(1)"] = max(res["(1)"], float(gap))
            if gap > tol:
                fail("(1)", f"domains {i} and {j} intersect", gap)

    pairs = data.declared_pairs()
    masks = {}
    for (i, j) in pairs:
        masks[(i, j)] = data.overlap(i, j, box)

    # (2) overlaps sit inside their chart, Omega_ii = Omega_i, symmetric non-emptiness.
    for i in range(data.n_charts):
        diag = data.overlap(i, i, box)
        if np.any(diag != ball):
            fail("(2)", f"Omega_{i}{i} differs from Omega_{i}", np.sum(diag != ball))
    for (i, j), m in masks.items():
        if np.any(m & ~ball):
            fail("(2)", f"Omega_{i}{j} leaves Omega_{i}", np.sum(m & ~ball))
        other = masks.get((j, i))
        if other is None:
            other = data.overlap(j, i, box)
        if bool(np.any(m)) != bool(np.any(other)):
            res["(2)"] = 1.0
            fail("(2)", f"Omega_{i}{j} and Omega_{j}{i} disagree on emptiness", 1.0)
    live = [(i, j) for (i, j) in pairs if np.any(masks[(i, j)])]

    # (3a) psi_ii is the identity.
    for i in range(data.n_charts):
        if (i, i) in data.transitions:
            r = float(np.max(np.abs(data.psi(i, i, samples) - samples)))
            res["(3a)"] = max(res["(3a)"], r)
            if r > tol:
                fail("(3a)", f"psi_{i}{i} is not the identity", r)

    # (3b) psi_ji o psi_ij = id on Omega_ji.
    for (i, j) in live:
        pts = box[masks[(i, j)]]
        z = data.psi(j, i, pts)
        r = float(np.max(np.abs(data.psi(i, j, z) - pts)))
        res["(3b)"] = max(res["(3b)"], r)
        if r > tol:
            fail("(3b)", f"psi_{i}{j} is not inverse to psi_{j}{i}", r)

    # (3c) cocycle psi_li = psi_lj o psi_ji, and invertible differentials.
    h = 1e-5
    for (i, j) in live:
        mij = masks[(i, j)]
        pts = box[mij]
        z = data.psi(j, i, pts)
        D = np.stack(
            [(data.psi(j, i, pts + h * e) - data.psi(j, i, pts - h * e)) / (2 * h) for e in np.eye(N)],
            axis=-1,
        )
        det = np.abs(np.linalg.det(D))
        if np.any(det < 1e-6):
            fail("(3c)", f"psi_{j}{i} has a singular differential", float(det.min()))
        for l in range(data.n_charts):
            if l in (i, j) or (i, l) not in masks or (j, l) not in masks:
                continue
            sel = masks[(i, l)][mij] & data.overlap(j, l, z)
            if not np.any(sel):
                continue
            lhs = data.psi(l, i, pts[sel])
            rhs = data.psi(l, j, z[sel])
            r = float(np.max(np.abs(lhs - rhs)))
            res["(3c)"] = max(res["(3c)"], r)
            if r > tol:
                fail("(3c)", f"cocycle fails on ({l}, {j}, {i})", r)

    # (4) and (v): boundary points of Omega_ij inside Omega_i.
    idx = np.arange(len(box)).reshape((n_check,) * N)
    for (i, j) in live:
        m = masks[(i, j)].reshape((n_check,) * N)
        bl = ball.reshape((n_check,) * N)
        ins, outs = [], []
        for axis in range(N):
            for shift in (1, -1):
                mm = np.roll(m, shift, axis)
                bb = np.roll(bl, shift, axis)
                nbr = np.roll(idx, shift, axis)
                edge = np.ones_like(m)
                sl = [slice(None)] * N
                sl[axis] = 0 if shift == 1 else -1
                edge[tuple(sl)] = False
                sel = m & ~mm & bb & bl & edge
                ins.append(idx[sel])
                outs.append(nbr[sel])
        ins = np.concatenate(ins)
        outs = np.concatenate(outs)
        if len(ins) == 0:
            continue
        xb = _bisect(data, i, j, box[ins], box[outs])
        keep = np.linalg.norm(xb, axis=1) < rho * (1 - 1e-9)
        if not np.any(keep):
            continue
        r = np.linalg.norm(data.psi(j, i, xb[keep]), axis=1)
        dev = np.abs(r - rho)
        res["(v)"] = max(res["(v)"], float(dev.max()))
        tol_b = max(tol, 1e-9 * rho)
        if np.any(r < rho - tol_b):
            res["(4)"] = max(res["(4)"], float((rho - r).max()))
            fail("(4)", f"boundary of Omega_{i}{j} maps into the interior of Omega_{j}", (rho - r).max())
        if np.any(r > rho + tol_b):
            fail("(v)", f"boundary of Omega_{i}{j} maps off the boundary of Omega_{j}", (r - rho).max())

    failures.sort(key=lambda f: CONDITIONS.index(f["condition"]))
    return ValidationReport(not failures, failures, res)


@dataclass
class GluedManifold:
    """Limit manifold assembled from gluing data with limit metrics and partition."""

    data: GluingData
    metrics: list[Callable]
    partitions: list[Callable]
    complete: list[bool]
    validation: ValidationReport | None = None

    @property
    def dimension(self) -> int:
        return self.data.dimension

    @property
    def rho(self) -> float:
        return self.data.rho

    def metric_flatness(self, grid: QuadratureGrid) -> float:
        """``sup |g_i - I|`` over all charts on grid nodes."""
        eye = np.eye(self.dimension)
        return max(float(np.max(np.abs(g(grid.nodes) - eye))) for g in self.metrics)

    def to_json(self, n: int = 17) -> dict:
        rho = self.rho
        N = self.dimension
        box = cartesian_nodes(N, 1.05 * rho, n)
        charts = []
        for i in range(self.data.n_charts):
            G = self.metrics[i](box)
            charts.append(
                {
                    "index": i,
                    "offset": [float(v) for v in self.data.offsets[i]],
                    "complete": bool(self.complete[i]),
                    "metric": G.reshape(len(box), -1).tolist(),
                }
            )
        overlaps, transitions = [], []
        for (i, j) in self.data.declared_pairs():
            m = self.data.overlap(i, j, box)
            overlaps.append({"i": i, "j": j, "bitmap": base64.b64encode(np.packbits(m).tobytes()).decode()})
            if (i, j) in self.data.transitions and np.any(self.data.overlap(j, i, box)):
                transitions.append({"i": i, "j": j, "samples": self.data.psi(i, j, box).tolist()})
        return {
            "format": GLUED_FORMAT,
            "dimension": N,
            "rho": rho,
            "box": {"half_width": 1.05 * rho, "n": n},
            "charts": charts,
            "overlaps": overlaps,
            "transitions": transitions,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GluedManifold":
        if doc.get("format") != GLUED_FORMAT:
            raise GluingError(f"unsupported glued manifold format {doc.get('format')!r}")
        N = int(doc["dimension"])
        rho = float(doc["rho"])
        n = int(doc["box"]["n"])
        hw = float(doc["box"]["half_width"])
        axis = np.linspace(-hw, hw, n)
        axes = (axis,) * N
        box = cartesian_nodes(N, hw, n)

        def interp(samples):
            vals = np.asarray(samples, dtype=float).reshape((n,) * N + (-1,))
            f = RegularGridInterpolator(axes, vals, bounds_error=False, fill_value=None)
            return lambda xi: f(np.atleast_2d(xi))

        transitions = {(t["i"], t["j"]): interp(t["samples"]) for t in doc["transitions"]}
        overlaps = {}
        for o in doc["overlaps"]:
            bits = np.unpackbits(np.frombuffer(base64.b64decode(o["bitmap"]), dtype=np.uint8))[: len(box)]
            if not bits.any():
                overlaps[(o["i"], o["j"])] = lambda xi: np.zeros(len(np.atleast_2d(xi)), dtype=bool)
        offsets = np.array([c["offset"] for c in doc["charts"]], dtype=float)
        data = GluingData(N, rho, offsets, transitions, overlaps)
        metrics = []
        for c in doc["charts"]:
            f = interp(c["metric"])
            metrics.append(lambda xi, f=f: f(xi).reshape(-1, N, N))
        partitions = [None] * len(offsets)
        complete = [bool(c["complete"]) for c in doc["charts"]]
        return cls(data, metrics, partitions, complete)

    def chart_graph_distance(self, source: tuple[int, np.ndarray], target: tuple[int, np.ndarray], n: int = 9) -> float:
        """Approximate geodesic distance through the glued charts.

        Nodes are a Cartesian sample of each chart ball plus the images of the
        other charts' samples under the transitions; within a chart every pair of
        nodes is joined by a straight segment measured with the chart metric.
        """
        rho = self.rho
        base = cartesian_nodes(self.dimension, rho, n)
        base = base[np.linalg.norm(base, axis=1) < rho * 0.999]
        per_chart: list[list[np.ndarray]] = [[] for _ in range(self.data.n_charts)]
        labels: list[list[int]] = [[] for _ in range(self.data.n_charts)]
        next_id = 0
        native = []
        for i in range(self.data.n_charts):
            ids = np.arange(next_id, next_id + len(base))
            next_id += len(base)
            native.append(ids)
            per_chart[i].append(base)
            labels[i].append(ids)
        src_id, tgt_id = next_id, next_id + 1
        per_chart[source[0]].append(np.atleast_2d(source[1]))
        labels[source[0]].append(np.array([src_id]))
        per_chart[target[0]].append(np.atleast_2d(target[1]))
        labels[target[0]].append(np.array([tgt_id]))
        extra = {source[0]: [(np.atleast_2d(source[1]), np.array([src_id]))],
                 target[0]: [(np.atleast_2d(target[1]), np.array([tgt_id]))]}
        next_id += 2
        for (i, j) in self.data.declared_pairs():
            if (i, j) not in self.data.transitions:
                continue
            pts = [base] + [p for p, _ in extra.get(j, [])]
            ids = [native[j]] + [l for _, l in extra.get(j, [])]
            pts = np.vstack(pts)
            ids = np.concatenate(ids)
            inside = self.data.overlap(j, i, pts)
            if not np.any(inside):
                continue
            per_chart[i].append(self.data.psi(i, j, pts[inside]))
            labels[i].append(ids[inside])
        rows, cols, vals = [], [], []
        for i in range(self.data.n_charts):
            P = np.vstack(per_chart[i])
            L = np.concatenate(labels[i])
            diff = P[None, :, :] - P[:, None, :]
            mid = 0.5 * (P[None, :, :] + P[:, None, :]).reshape(-1, self.dimension)
            G = self.metrics[i](mid).reshape(len(P), len(P), self.dimension, self.dimension)
            length = np.sqrt(np.maximum(np.einsum("abi,abij,abj->ab", diff, G, diff), 0.0))
            a, b = np.triu_indices(len(P), 1)
            rows.append(L[a])
            cols.append(L[b])
            vals.append(length[a, b] + 1e-300)
        graph = coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(next_id, next_id)
        ).tocsr()
        dist = dijkstra(graph, directed=False, indices=src_id)
        return float(dist[tgt_id])


def assemble_infinity_manifold(
    system, transitions: dict, metrics: list, partitions: list, tol: float = 1e-8, n_check: int = 25
) -> GluedManifold:
    """Glue the limit charts of a trailing system and validate the result."""
    rho = system.rho
    n = system.size
    N = system.net.model.dimension
    # Lay the p-domains on a coarse lattice so they are pairwise disjoint.
    side = int(np.ceil(n ** (1.0 / N)))
    offsets = np.array([np.unravel_index(i, (side,) * N) for i in range(n)], dtype=float) * 3 * rho
    data = GluingData(N, rho, offsets, dict(transitions), {})
    report = validate_gluing_data(data, tol=tol, n_check=n_check)
    glued = GluedManifold(data, metrics, partitions, [system.complete(i) for i in range(n)], report)
    if not report.ok:
        raise GluingError(
            "limit gluing data failed " + ", ".join(report.failed_conditions), report
        )
    return glued


@dataclass
class LocalProfile:
    """A profile component ``w_i`` on chart ``i``: samples plus exact evaluator."""

    values: np.ndarray
    grads: np.ndarray
    evaluator: Callable

    def __call__(self, xi):
        return self.evaluator(np.atleast_2d(xi))


@dataclass
class GlobalProfile:
    """Compatible family ``w_i`` with ``w_i o psi_ij = w_j`` on overlaps."""

    manifold: GluedManifold
    locals: list[LocalProfile]
    compatibility_residual: float
    converged: bool


def compatibility_residual(manifold: GluedManifold, local: list[LocalProfile], grid: QuadratureGrid) -> float:
    worst = 0.0
    data = manifold.data
    scale = max(float(np.max(np.abs(w.values))) for w in local) or 1.0
    for (i, j) in data.declared_pairs():
        if (i, j) not in data.transitions:
            continue
        mask = data.overlap(j, i, grid.nodes)
        if not np.any(mask):
            continue
        xi = grid.nodes[mask]
        wi = local[i](data.psi(i, j, xi))[0]
        wj = local[j](xi)[0]
        worst = max(worst, float(np.max(np.abs(wi - wj))) / scale)
    return worst


def assemble_global_profile(
    manifold: GluedManifold, local: list[LocalProfile], grid: QuadratureGrid, tol: float = 1e-6
) -> GlobalProfile:
    r = compatibility_residual(manifold, local, grid)
    return GlobalProfile(manifold, local, r, r <= tol)


def infinity_norms(profile: GlobalProfile, grid: QuadratureGrid, p: float) -> tuple[float, float]:
    """``(|w|^2_{H^{1,2}}, |w|_p^p)`` on the limit manifold via the limit partition."""
    h12 = 0.0
    lp = 0.0
    nodes = grid.nodes
    M = profile.manifold
    for i, w in enumerate(profile.locals):
        eta, _ = M.partitions[i](nodes)
        live = eta > 0
        if not np.any(live):
            continue
        xi = nodes[live]
        G = M.metrics[i](xi)
        ginv = np.linalg.inv(G)
        vol = grid.weights[live] * np.sqrt(np.linalg.det(G))
        v, g = w.values[live], w.grads[live]
        dens = np.einsum("ma,mab,mb->m", g, ginv, g) + v * v
        h12 += float(np.sum(eta[live] * dens * vol))
        lp += float(np.sum(eta[live] * np.abs(v) ** p * vol))
    return h12, lp


def infinity_equivalent_norm(profile: GlobalProfile, grid: QuadratureGrid) -> float:
    """``(sum_i |eta_i w_i|^2_{H^{1,2}(flat)})^{1/2}``."""
    total = 0.0
    M = profile.manifold
    for i, w in enumerate(profile.locals):
        eta, deta = M.partitions[i](grid.nodes)
        v = eta * w.values
        g = eta[:, None] * w.grads + deta * w.values[:, None]
        total += float(np.sum((np.sum(g * g, axis=1) + v * v) * grid.weights))
    return float(np.sqrt(total))


def check_profile_samples(local: list[LocalProfile]) -> None:
    for w in local:
        if not np.all(np.isfinite(w.values)):
            raise NumericalError("profile samples are not finite")
