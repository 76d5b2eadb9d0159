"""Spotlight scans, greedy profile extraction and the energy-identity verifiers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covering import Ball, DiscreteNet, PartitionOfUnity
from .funcspace import (
    FunctionSequence,
    Integrator,
    ManifoldFunction,
    SumFunction,
    TailAverage,
    Windowed,
    ZeroFunction,
    chart_pullback,
    pullback_chart_function,
    weak_limit_estimate,
)
from .geometry import EuclideanModel, GeometryError, NumericalError, make_normal_chart
from .infinity import (
    GlobalProfile,
    GluedManifold,
    GluingError,
    LocalProfile,
    assemble_global_profile,
    assemble_infinity_manifold,
    infinity_equivalent_norm,
    infinity_norms,
)
from .trailing import (
    StabilizationError,
    TrailingSystem,
    build_trailing_system,
    cocycle_residual,
    estimate_limit_metric,
    estimate_limit_partition,
    estimate_transition_limits,
    metric_compatibility_residual,
    partition_sum_residual,
    stabilize_intersections,
)

PEAK_SEPARATION = 4.0  # in units of rho


class ExtractionError(RuntimeError):
    """The greedy extraction reached an inconsistent state."""


def sobolev_exponent(dimension: int) -> float:
    """``2N / (N - 2)``, or infinity for ``N <= 2``."""
    return float("inf") if dimension <= 2 else 2.0 * dimension / (dimension - 2)


def exponent_interval(dimension: int) -> str:
    """The admissible open interval of ``p`` as text, e.g. ``(2, ∞)``."""
    upper = sobolev_exponent(dimension)
    return "(2, ∞)" if np.isinf(upper) else f"(2, {upper:g})"


@dataclass
class ExtractionParams:
    p: float
    rho: float = 0.8
    rho_hat: float = 0.72
    k_max: int = 48
    i_max: int = 12
    max_profiles: int = 4
    grid_res: int = 64
    eps_stop: float | None = None
    eps_stop_fraction: float = 1e-3
    dictionary_size: int = 16
    weak_tol: float = 1e-3
    transition_tol: float = 1e-6
    metric_tol: float = 1e-6
    compat_tol: float = 1e-6
    gluing_tol: float = 1e-8
    divergence_factor: float = 4.0
    dominance: float = 0.5
    n_candidates: int = 4
    window: list[Ball] | None = None
    seed: int = 0

    def check(self, dimension: int) -> None:
        upper = sobolev_exponent(dimension)
        if not 2.0 < self.p < upper:
            raise ValueError(
                f"p={self.p:g} must lie in the open interval {exponent_interval(dimension)} for N={dimension}"
            )
        if self.eps_stop is not None and self.eps_stop <= 0:
            raise ValueError("eps_stop must be positive")
        if self.max_profiles < 1:
            raise ValueError("max_profiles must be at least 1")


def spotlight_scan(integ: Integrator, residual: ManifoldFunction, p: float):
    """Exact argmax over net centres of ``int_{B(y, rho)} |residual|^p``.

    Returns ``(best_center_index, local_mass, (centres, masses))``; the index is
    ``-1`` when the residual vanishes on the net.
    """
    centers, masses = integ.local_masses(residual, p)
    if len(centers) == 0 or masses.max() <= 0:
        return -1, 0.0, (centers, masses)
    j = int(np.argmax(masses))
    return int(centers[j]), float(masses[j]), (centers, masses)


def vanishing_test(integ: Integrator, seq: FunctionSequence, p: float, eps: float):
    """Spotlight test for vanishing of ``u_k`` in ``L^p``.

    Vanishing iff the sup local mass at ``k_max`` is below ``eps`` and the
    trace decreases over the last quarter. Also returns the smallest constant
    ``C`` with ``|u_k|_p^p <= C |u_k|^2 (sup mass)^{1 - 2/p}`` over the sequence.
    """
    trace = []
    c_max = 0.0
    for k in seq.ks():
        u = seq[k]
        _, mass, _ = spotlight_scan(integ, u, p)
        trace.append(mass)
        lp = integ.lp_power(u, p)
        h2 = integ.h12_norm(u) ** 2
        if mass > 0 and h2 > 0:
            c_max = max(c_max, lp / (h2 * mass ** (1 - 2 / p)))
    trace = np.array(trace)
    q = max(2, len(trace) // 4)
    decreasing = bool(np.all(np.diff(trace[-q:]) < 0))
    return bool(trace[-1] < eps and decreasing), trace, c_max


class ElementaryConcentration(ManifoldFunction):
    """``W_k = sum_{i <= i_max} chi_{y_{k;i}} (w_i o e_{y_{k;i}}^{-1})``."""

    def __init__(self, system: TrailingSystem, k: int, pu: PartitionOfUnity, locals: list[LocalProfile]):
        if k not in system.order:
            raise GeometryError(f"index {k} is not part of the trailing system")
        self.system = system
        self.k = k
        self.pu = pu
        self.locals = locals
        net = system.net
        self.support = [Ball(net.centers[c], pu.rho) for c in system.order[k]]

    def value_and_grad(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        val = np.zeros(len(X))
        grad = np.zeros_like(X)
        net = self.system.net
        for i, c in enumerate(self.system.order[self.k]):
            c = int(c)
            mask = net.model.in_ball(X, net.centers[c], self.pu.rho)
            if not np.any(mask):
                continue
            sel = np.nonzero(mask)[0]
            chi, dchi = self.pu.chi(c, X[sel])
            live = (chi > 0) | np.any(dchi != 0, axis=1)
            if not np.any(live):
                continue
            sel, chi, dchi = sel[live], chi[live], dchi[live]
            chart = net.chart(c)
            xi = chart.inverse(X[sel])
            w, dw = self.locals[i](xi)
            if isinstance(net.model, EuclideanModel):
                cov = dw @ chart.basis.T
            else:
                cov = chart.covector_of(xi, chart.jacobian(xi), dw)
            val[sel] += chi * w
            grad[sel] += dchi * w[:, None] + chi[:, None] * cov
        return val, grad


def synthesize_elementary_concentration(profile: GlobalProfile, system: TrailingSystem, pu: PartitionOfUnity, k: int):
    if system.retained and k not in system.retained:
        raise GeometryError(f"index {k} is not retained by the trailing system")
    return ElementaryConcentration(system, k, pu, profile.locals)


def _tail_pullback_evaluator(seq: FunctionSequence, system: TrailingSystem, i: int):
    tail = system.tail()

    def evaluate(xi):
        xi = np.atleast_2d(xi)
        vals = np.zeros(len(xi))
        grads = np.zeros_like(xi, dtype=float)
        for k in tail:
            v, g = chart_pullback(seq[k], system.chart(k, i), xi)
            vals += v
            grads += g
        return vals / len(tail), grads / len(tail)

    return evaluate


@dataclass
class Bubble:
    """One extracted profile and everything needed to rebuild ``W_k``."""

    index: int
    core: dict[int, int]
    system: TrailingSystem
    transitions: dict
    manifold: GluedManifold
    profile: GlobalProfile
    pu: PartitionOfUnity
    h12_sq: float
    lp_p: float
    equivalent_norm: float
    weak_residual: float
    diagnostics: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    def W(self, k: int) -> ManifoldFunction:
        if k not in self.system.retained:
            return ZeroFunction()
        if k not in self._cache:
            self._cache[k] = synthesize_elementary_concentration(self.profile, self.system, self.pu, k)
        return self._cache[k]


def build_bubble(
    seq: FunctionSequence,
    integ: Integrator,
    core: dict[int, int],
    params: ExtractionParams,
    index: int = 1,
    i_max: int | None = None,
) -> Bubble:
    """Trailing system, limit gluing data and global profile along a core track.

    ``core`` maps each ``k`` to a net index. Raises ``NumericalError`` when the
    limits do not converge and ``GluingError`` when the limit data cannot be glued.
    """
    net, pu = integ.net, integ.pu
    i_max = params.i_max if i_max is None else i_max
    ks = sorted(core)
    system = build_trailing_system(net, {k: net.centers[core[k]] for k in ks}, i_max, ks)
    stabilize_intersections(system)
    grid = integ.grid
    transitions = estimate_transition_limits(system, grid, params.transition_tol)
    worst_t = max(t.residual for t in transitions.values())
    if worst_t > params.transition_tol:
        raise NumericalError("transition maps did not converge", worst_t)
    metrics = [estimate_limit_metric(system, i, grid, params.metric_tol) for i in range(system.size)]
    worst_m = max(m.residual for m in metrics)
    if worst_m > params.metric_tol:
        raise NumericalError("limit metrics did not converge", worst_m)
    partitions = [estimate_limit_partition(pu, system, i) for i in range(system.size)]
    manifold = assemble_infinity_manifold(system, transitions, metrics, partitions, tol=params.gluing_tol)

    locals_ = []
    weak_res = 0.0
    for i in range(system.size):
        pulls = [pullback_chart_function(seq[k], system.chart(k, i), grid) for k in system.retained]
        limit, _, res = weak_limit_estimate(pulls, params.dictionary_size, params.weak_tol)
        weak_res = max(weak_res, res)
        locals_.append(LocalProfile(limit.values, limit.grads, _tail_pullback_evaluator(seq, system, i)))
    profile = assemble_global_profile(manifold, locals_, grid, params.compat_tol)
    h12_sq, lp_p = infinity_norms(profile, grid, params.p)
    diagnostics = {
        "transition_residual": worst_t,
        "transition_oscillation": max(t.oscillation for t in transitions.values()),
        "metric_residual": worst_m,
        "metric_flatness": max(m.flatness for m in metrics),
        "cocycle_residual": cocycle_residual(system, transitions, _coarse(grid)),
        "metric_compatibility_residual": metric_compatibility_residual(system, transitions, metrics, _coarse(grid)),
        "partition_sum_residual": partition_sum_residual(system, transitions, partitions, _coarse(grid)),
        "compatibility_residual": profile.compatibility_residual,
        "gluing_residuals": manifold.validation.residuals,
        "retained": len(system.retained),
    }
    return Bubble(
        index,
        dict(core),
        system,
        transitions,
        manifold,
        profile,
        pu,
        h12_sq,
        lp_p,
        infinity_equivalent_norm(profile, grid),
        weak_res,
        diagnostics,
    )


def _coarse(grid):
    from .covering import make_grid

    return make_grid(grid.dimension, grid.radius, 16)


def _peaks(centers: np.ndarray, masses: np.ndarray, net: DiscreteNet, floor: float, limit: int) -> list[int]:
    """Greedy well-separated local maxima of a mass table, strongest first."""
    order = np.argsort(-masses, kind="stable")
    chosen: list[int] = []
    sep = PEAK_SEPARATION * net.rho
    for j in order:
        if masses[j] <= floor or len(chosen) >= limit:
            break
        c = int(centers[j])
        if all(net.model.distance(net.centers[c], net.centers[o])[0] > sep for o in chosen):
            chosen.append(c)
    return chosen


@dataclass
class DecompositionReport:
    weak_limit: ManifoldFunction
    weak_limit_info: dict
    bubbles: list[Bubble]
    stages: list[dict]
    traces: list[dict]
    residuals: dict[int, list[ManifoldFunction]]
    initial_mass: float
    eps_stop: float
    diagnostics: list[str]
    p: float
    k_max: int
    verdicts: dict = field(default_factory=dict)
    energy: dict = field(default_factory=dict)
    decoupling: dict = field(default_factory=dict)

    def residual(self, k: int, stage: int | None = None) -> ManifoldFunction:
        stage = len(self.bubbles) if stage is None else stage
        return self.residuals[stage][k - 1]


def _residual_functions(seq, w0, bubbles) -> list[ManifoldFunction]:
    out = []
    for k in seq.ks():
        terms = [seq[k], w0] + [b.W(k) for b in bubbles]
        coefs = [1.0, -1.0] + [-1.0] * len(bubbles)
        out.append(SumFunction(terms, coefs))
    return out


def _window_centers(net: DiscreteNet, window: list[Ball]) -> list[int]:
    idx: set[int] = set()
    for ball in window:
        idx.update(net.within(ball.center, ball.radius + net.rho).tolist())
    return sorted(idx)


def extract_profiles(
    seq: FunctionSequence, integ: Integrator, params: ExtractionParams
) -> DecompositionReport:
    """Greedy concentration-compactness extraction of profiles along diverging cores."""
    net, pu = integ.net, integ.pu
    model = net.model
    params.check(model.dimension)
    p = params.p
    ks = list(seq.ks())
    K = ks[-1]
    tail = ks[len(ks) - max(2, len(ks) // 4):]
    diagnostics: list[str] = []

    # Step 1: weak limit on fixed charts covering the reference window.
    window = params.window if params.window is not None else (seq[1].support or [])
    win_centers = _window_centers(net, window)
    weak_res = 0.0
    for c in win_centers:
        chart = net.chart(c)
        pulls = [pullback_chart_function(seq[k], chart, integ.grid) for k in ks]
        _, ok, res = weak_limit_estimate(pulls, params.dictionary_size, params.weak_tol)
        weak_res = max(weak_res, res)
    if weak_res > params.weak_tol:
        diagnostics.append(f"weak limit on the window did not settle (residual {weak_res:.3g})")
    w0 = Windowed(TailAverage([seq[k] for k in tail]), pu, win_centers) if win_centers else ZeroFunction()
    window_center = None
    if window:
        window_center = np.asarray(window[0].center, dtype=float)

    # Case 2 is vacuous: fixed-chart limits of the residual must vanish.
    leak = 0.0
    for c in win_centers:
        chart = net.chart(c)
        u_tail = np.mean([chart_pullback(seq[k], chart, integ.grid.nodes)[0] for k in tail], axis=0)
        v_tail = u_tail - chart_pullback(w0, chart, integ.grid.nodes)[0]
        leak = max(leak, float(np.max(np.abs(v_tail))))
    if leak > params.weak_tol * max(1.0, _sup_abs(seq, integ, K)):
        diagnostics.append(f"fixed-chart limit of the residual is not negligible ({leak:.3g})")

    sup_masses = {k: spotlight_scan(integ, seq[k], p)[1] for k in ks}
    initial = max(sup_masses.values())
    eps_stop = params.eps_stop if params.eps_stop is not None else params.eps_stop_fraction * initial

    bubbles: list[Bubble] = []
    stages: list[dict] = []
    folds = 0
    skipped: set[int] = set()
    residuals = _residual_functions(seq, w0, bubbles)
    lp_prev = integ.lp_norm(residuals[-1], p)
    threshold = params.divergence_factor * params.rho * params.i_max

    while len(bubbles) < params.max_profiles:
        tables = {k: integ.local_masses(residuals[k - 1], p) for k in ks}
        tail_sup = max(float(tables[k][1].max(initial=0.0)) for k in tail)
        stage = {"stage": len(bubbles) + 1, "tail_sup_mass": tail_sup}
        if tail_sup < eps_stop:
            stage["outcome"] = "stop: local mass below threshold"
            stages.append(stage)
            break
        centers_K, masses_K = tables[K]
        peaks = _peaks(centers_K, masses_K, net, eps_stop, params.n_candidates + len(skipped))
        peaks = [c for c in peaks if c not in skipped][: params.n_candidates]
        if not peaks:
            stage["outcome"] = "stop: no candidate above threshold"
            stages.append(stage)
            break
        candidates = []
        for c in peaks:
            nbrs = net.within(net.centers[c], 2 * net.rho)
            est = float(np.sum(integ.local_energies(residuals[K - 1], _trailing_ball(net, c, params.i_max))))
            candidates.append({"center": net.centers[c].tolist(), "net_index": c, "estimate": est,
                               "local_mass": float(masses_K[list(centers_K).index(c)]), "neighbors": len(nbrs)})
        stage["candidates"] = candidates

        chosen = None
        for cand in candidates:
            core = _track_core(net, tables, ks, cand["net_index"], eps_stop)
            d_prior = [_divergence(net, core, b.core, tail) for b in bubbles]
            if window_center is not None:
                d_prior.append(_divergence(net, core, {k: window_center for k in ks}, tail, fixed=True))
            bad = [d for d in d_prior if not (d["final"] > threshold and d["increasing"])]
            if bad:
                folds += 1
                diagnostics.append(
                    f"stage {stage['stage']}: candidate at {np.round(cand['center'], 6).tolist()} "
                    f"does not diverge from an existing core (distance {bad[0]['final']:.3g}); folded"
                )
                skipped.add(cand["net_index"])
                if folds >= 2:
                    raise ExtractionError("non-divergent duplicate core detected twice")
                continue
            chosen = (cand, core)
            break
        if chosen is None:
            stage["outcome"] = "stop: all candidates folded"
            stages.append(stage)
            break
        cand, core = chosen
        try:
            bubble = build_bubble(seq, integ, core, params, index=len(bubbles) + 1)
        except (NumericalError, GluingError, StabilizationError) as exc:
            diagnostics.append(f"stage {stage['stage']}: bubble skipped ({exc})")
            skipped.add(cand["net_index"])
            stage["outcome"] = f"skipped: {exc}"
            stages.append(stage)
            continue
        best = max(c["estimate"] for c in candidates)
        stage["modulus"] = bubble.h12_sq
        stage["best_candidate_estimate"] = best
        stage["dominance_ok"] = bool(bubble.h12_sq >= params.dominance * best)
        if not stage["dominance_ok"]:
            raise ExtractionError(
                f"selected profile energy {bubble.h12_sq:.4g} is below half the best candidate estimate {best:.4g}"
            )
        trial = _residual_functions(seq, w0, bubbles + [bubble])
        lp_new = integ.lp_norm(trial[-1], p)
        stage["lp_residual_before"] = lp_prev
        stage["lp_residual_after"] = lp_new
        if not lp_new < lp_prev:
            diagnostics.append(f"stage {stage['stage']}: residual did not decrease; stopping")
            stage["outcome"] = "stop: stagnation"
            stages.append(stage)
            break
        stage["outcome"] = "accepted"
        stages.append(stage)
        bubbles.append(bubble)
        residuals = trial
        lp_prev = lp_new
    else:
        stages.append({"stage": len(bubbles) + 1, "outcome": "stop: max_profiles reached"})

    all_res = {0: _residual_functions(seq, w0, [])}
    for n in range(1, len(bubbles) + 1):
        all_res[n] = _residual_functions(seq, w0, bubbles[:n])
    traces = []
    for s in range(len(bubbles) + 1):
        for k in ks:
            r = all_res[s][k - 1]
            traces.append(
                {"k": k, "stage": s, "lp_residual": integ.lp_norm(r, p), "h12_residual": integ.h12_norm(r)}
            )
    weak_info = {
        "window_centers": [int(c) for c in win_centers],
        "residual": weak_res,
        "fixed_chart_leak": leak,
        "h12_norm": integ.h12_norm(w0),
        "lp_norm": integ.lp_norm(w0, p),
    }
    return DecompositionReport(
        w0, weak_info, bubbles, stages, traces, all_res, initial, eps_stop, diagnostics, p, K
    )


def _sup_abs(seq, integ, k) -> float:
    vals = [np.max(np.abs(v)) for v, _ in integ.evaluate(seq[k], integ.centers_for(seq[k]))]
    return float(max(vals, default=0.0))


def _trailing_ball(net: DiscreteNet, c: int, i_max: int) -> np.ndarray:
    from .trailing import ordered_neighbors

    return ordered_neighbors(net, net.centers[c], i_max + 1)


def _track_core(net: DiscreteNet, tables: dict, ks: list[int], start: int, floor: float) -> dict[int, int]:
    """Follow the peak of the residual backwards in ``k`` from ``start`` at the last index."""
    core = {ks[-1]: start}
    prev = start
    for k in reversed(ks[:-1]):
        centers, masses = tables[k]
        peaks = _peaks(centers, masses, net, floor, 8)
        if not peaks:
            core[k] = prev
            continue
        d = [net.model.distance(net.centers[c], net.centers[prev])[0] for c in peaks]
        prev = peaks[int(np.argmin(d))]
        core[k] = prev
    return dict(sorted(core.items()))


def _divergence(net: DiscreteNet, core: dict, other: dict, tail: list[int], fixed: bool = False) -> dict:
    def pt(track, k):
        v = track[k]
        return np.asarray(v, dtype=float) if fixed and track is other else net.centers[v]

    d = np.array([net.model.distance(pt(core, k), pt(other, k))[0] for k in tail])
    return {"final": float(d[-1]), "increasing": bool(np.all(np.diff(d) >= 0) and d[-1] > d[0])}


def verify_energy_identities(report: DecompositionReport, seq: FunctionSequence, integ: Integrator) -> dict:
    """Energy identities at the tail of the sequence.

    All discrepancies are relative: P2/P3 to ``|w|^2``, the Plancherel slack to
    ``limsup |u_k|^2`` and the Brezis-Lieb discrepancy to ``max_k |u_k|_p^p``.
    """
    p = report.p
    ks = list(seq.ks())
    tail = ks[len(ks) - max(2, len(ks) // 4):]
    K = ks[-1]
    u_sq = {k: integ.h12_norm(seq[k]) ** 2 for k in tail}
    limsup = max(u_sq.values())
    lp_max = max(integ.lp_power(seq[k], p) for k in ks)
    w0_sq = integ.h12_norm(report.weak_limit) ** 2
    w0_p = integ.lp_power(report.weak_limit, p)
    per_bubble = []
    for b in report.bubbles:
        WK = b.W(K)
        inner = integ.h12_inner(seq[K], WK)
        wk_sq = integ.h12_norm(WK) ** 2
        scale = b.h12_sq if b.h12_sq > 0 else 1.0
        c_ratio = max(integ.h12_norm(b.W(k)) for k in b.system.tail()) / np.sqrt(scale)
        per_bubble.append(
            {
                "bubble": b.index,
                "w_h12_sq": b.h12_sq,
                "w_lp_p": b.lp_p,
                "inner_uk_Wk": inner,
                "Wk_h12_sq": wk_sq,
                "p2_discrepancy": abs(inner - b.h12_sq) / scale,
                "p3_discrepancy": abs(wk_sq - b.h12_sq) / scale,
                "concentration_constant": float(c_ratio),
            }
        )
    slack = limsup - w0_sq - sum(b.h12_sq for b in report.bubbles)
    bl = abs(integ.lp_power(seq[K], p) - w0_p - sum(b.lp_p for b in report.bubbles))
    out = {
        "limsup_u_h12_sq": limsup,
        "weak_limit_h12_sq": w0_sq,
        "weak_limit_lp_p": w0_p,
        "plancherel_slack": slack,
        "plancherel_slack_relative": slack / limsup if limsup > 0 else 0.0,
        "brezis_lieb_discrepancy": bl,
        "brezis_lieb_relative": bl / lp_max if lp_max > 0 else 0.0,
        "bubbles": per_bubble,
    }
    report.energy = out
    return out


def _probe_density(integ: Integrator, f: ManifoldFunction, chart) -> tuple[np.ndarray, np.ndarray]:
    """``|grad f|^2 + f^2`` and volume weights on the grid of ``chart``."""
    v, g = chart_pullback(f, chart, integ.grid.nodes)
    if isinstance(chart.model, EuclideanModel):
        return np.sum(g * g, axis=1) + v * v, integ.grid.weights
    from .geometry import pullback_metric_at

    G = pullback_metric_at(chart, integ.grid.nodes)
    dens = np.einsum("ma,mab,mb->m", g, np.linalg.inv(G), g) + v * v
    return dens, integ.grid.weights * np.sqrt(np.linalg.det(G))


def probe_trace(integ: Integrator, bubble: Bubble, offset_scale: float | None = None) -> list[dict]:
    """``|W_k o e_{y'_k}|_{H^{1,2}(Omega_rho)}^2`` along probes drifting away from the core.

    The probe leaves the core along the direction opposite to the energy
    centroid of the profile in the core chart, so it moves away from the mass.
    """
    net = integ.net
    model = net.model
    tail = bubble.system.tail()
    rho = net.rho
    span = offset_scale if offset_scale is not None else 2.5 * rho
    n = len(tail)
    first = bubble.system.chart(tail[0], 0)
    dens, vol = _probe_density(integ, bubble.W(tail[0]), first)
    centroid = (dens * vol) @ integ.grid.nodes / max(float(np.sum(dens * vol)), 1e-300)
    direction = np.zeros(model.dimension)
    direction[0] = 1.0
    if np.linalg.norm(centroid) > 1e-9:
        direction = -centroid / np.linalg.norm(centroid)
    out = []
    for j, k in enumerate(tail):
        chart0 = bubble.system.chart(k, 0)
        delta = span * j / max(1, n - 1)
        probe = chart0.forward(delta * direction[None, :])[0]
        chart = make_normal_chart(model, probe, rho, None)
        dens, vol = _probe_density(integ, bubble.W(k), chart)
        out.append({"k": k, "offset": delta, "h12_sq": float(np.sum(dens * vol))})
    return out


def verify_decoupling(report: DecompositionReport, integ: Integrator) -> dict:
    """Pairwise ``<W^n_k, W^l_k>`` at the tail and probe pullback traces."""
    K = report.k_max
    n = len(report.bubbles)
    matrix = np.zeros((n, n))
    for a in range(n):
        for b in range(a, n):
            val = integ.h12_inner(report.bubbles[a].W(K), report.bubbles[b].W(K))
            matrix[a, b] = matrix[b, a] = val
    traces = {}
    for a in range(n):
        for b in range(a + 1, n):
            A, B = report.bubbles[a], report.bubbles[b]
            traces[f"{a + 1}-{b + 1}"] = [
                {"k": k, "inner": integ.h12_inner(A.W(k), B.W(k))} for k in A.system.tail() if k in B.system.retained
            ]
    probes = {str(b.index): probe_trace(integ, b) for b in report.bubbles}
    diag_min = float(np.min(np.diag(matrix))) if n else 0.0
    off = float(np.max(np.abs(matrix - np.diag(np.diag(matrix))))) if n > 1 else 0.0
    monotone = all(
        all(t[j + 1]["h12_sq"] <= t[j]["h12_sq"] * (1 + 1e-9) + 1e-14 for j in range(len(t) - 1))
        for t in probes.values()
    )
    out = {
        "matrix": matrix.tolist(),
        "max_off_diagonal": off,
        "off_diagonal_relative": off / diag_min if diag_min > 0 else 0.0,
        "pair_traces": traces,
        "probe_traces": probes,
        "probes_monotone": monotone,
    }
    report.decoupling = out
    return out
