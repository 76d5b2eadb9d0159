"""Acceptance suite: one group of tests per criterion, at the stated tolerances.

Every shipped scenario is run once per session at its default resolution; the
criteria below read their numbers from those runs. The terminal summary prints
one pass/fail line per criterion.
"""

import time

import numpy as np
import pytest

from profiledecomp.covering import Ball, build_net, build_partition_of_unity, dense_samples, make_grid
from profiledecomp.decomposition import build_bubble, spotlight_scan
from profiledecomp.geometry import make_normal_chart, metric_derivatives, minkowski, pullback_metric_at
from profiledecomp.infinity import validate_gluing_data
from profiledecomp.scenarios import load_scenario, run_decomposition

from .conftest import SCENARIO_DIR, random_points
from .gluing_cases import RHO, RHO_HAT, VIOLATIONS, lattice_gluing

KINDS = ["euclidean", "hyperbolic", "perturbed-euclidean"]
SCENARIOS = sorted(p.stem for p in SCENARIO_DIR.glob("*.json"))


def _config(name, **params):
    cfg = load_scenario(SCENARIO_DIR / f"{name}.json")
    if not params:
        return cfg
    doc = cfg.model_dump(mode="json")
    doc["params"].update(params)
    return type(cfg).model_validate(doc)


@pytest.fixture(scope="session")
def runs():
    return {name: run_decomposition(_config(name)) for name in SCENARIOS}


def _rel(a, b, floor=1e-12):
    return abs(a - b) / max(abs(b), floor)


# 1. Geometry fidelity


@pytest.mark.criterion(1)
@pytest.mark.parametrize("kind", KINDS)
def test_exp_log_roundtrip(models, kind, note):
    m = models[kind]
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    X = random_points(m, rng, 20, spread=2.0)
    worst = 0.0
    for i, x in enumerate(X):
        F = m.seeded_frame(x, i)
        v = rng.uniform(-1.0, 1.0, size=(10, 2)) * rng.uniform(0.1, 2.0)
        back = m.log(x, F, m.exp(x, F, v))
        worst = max(worst, float(np.max(np.abs(back - v))))
    elapsed = time.perf_counter() - t0
    note(f"{kind} roundtrip {worst:.1e} in {elapsed:.1f} s")
    assert worst <= 1e-6
    assert elapsed < 30


@pytest.mark.criterion(1)
def test_hyperbolic_distance_closed_form(models, note):
    m = models["hyperbolic"]
    rng = np.random.default_rng(102)
    X = m.lift(rng.uniform(-3, 3, size=(200, 2)))
    Q = m.lift(rng.uniform(-3, 3, size=(200, 2)))
    closed = np.arccosh(np.maximum(1.0, -minkowski(X, Q)))
    err = np.max(np.abs(m.distance(X, Q) - closed))
    note(f"hyperbolic distance {err:.1e}")
    assert err <= 1e-6


# 2. Normal-coordinate law


@pytest.mark.criterion(2)
@pytest.mark.parametrize("kind", KINDS)
def test_chart_origin_metric(models, kind, note):
    m = models[kind]
    rng = np.random.default_rng(202)
    Y = random_points(m, rng, 50, spread=2.0)
    g_err = dg_err = 0.0
    for i, y in enumerate(Y):
        chart = make_normal_chart(m, y, RHO, seed=i)
        g = pullback_metric_at(chart, np.zeros((1, 2)))[0]
        g_err = max(g_err, float(np.max(np.abs(g - np.eye(2)))))
        dg_err = max(dg_err, float(np.max(np.abs(metric_derivatives(chart, np.zeros((1, 2)))))))
    note(f"{kind} g(0) {g_err:.1e}, dg(0) {dg_err:.1e}")
    assert g_err <= 1e-6
    assert dg_err <= 1e-3


# 3. Covering and partition of unity


def _nets(models):
    m_e, m_h, m_p = models["euclidean"], models["hyperbolic"], models["perturbed-euclidean"]
    return {
        "euclidean-lattice": build_net(m_e, [Ball(np.zeros(2), 3.0)], RHO, RHO_HAT, policy="lattice"),
        "euclidean-greedy": build_net(m_e, [Ball(np.zeros(2), 2.5)], RHO, RHO_HAT, seed=3),
        "hyperbolic-greedy": build_net(m_h, [Ball(m_h.origin(), 2.5)], RHO, RHO_HAT, seed=0),
        "perturbed-greedy": build_net(m_p, [Ball(np.zeros(2), 3.0)], RHO, RHO_HAT, seed=0),
        "perturbed-far-lattice": build_net(m_p, [Ball(np.array([8.0, 0.0]), 3.0)], RHO, RHO_HAT, policy="lattice"),
    }


@pytest.fixture(scope="module")
def nets(models):
    return _nets(models)


@pytest.mark.criterion(3)
@pytest.mark.parametrize(
    "name", ["euclidean-lattice", "euclidean-greedy", "hyperbolic-greedy", "perturbed-greedy", "perturbed-far-lattice"]
)
def test_cover_and_partition_sum(nets, name, note):
    net = nets[name]
    samples = dense_samples(net.model, net.region, 10_000, seed=11)
    assert len(samples) == 10_000
    cover = net.check_cover(samples)
    pu = build_partition_of_unity(net.model, net)
    total = pu.total(samples[::5])
    err = float(np.max(np.abs(total - 1.0)))
    note(f"{name} cover {cover:.3f}, sum {err:.1e}")
    # Every sample lies in some chart ball B(y, rho).
    assert cover < RHO
    assert err <= 1e-9


@pytest.mark.criterion(3)
@pytest.mark.parametrize("name", ["euclidean-lattice", "perturbed-far-lattice"])
def test_derivative_constants_uniform(nets, name, note):
    net = nets[name]
    pu = build_partition_of_unity(net.model, net)
    ball = net.region[0]
    d = net.model.distance(net.centers, np.asarray(ball.center, dtype=float))
    interior = np.nonzero(d < ball.radius - 2 * RHO)[0]
    assert len(interior) >= 5
    grid = make_grid(2, RHO, 32)
    consts = np.array([pu.derivative_constants(int(i), grid) for i in interior])
    spread = (consts.max(axis=0) - consts.min(axis=0)) / consts.max(axis=0)
    note(f"{name} spread C0/C1/C2 {spread[0]:.1e}/{spread[1]:.1e}/{spread[2]:.1e}")
    assert np.all(spread <= 0.05)


# 4. Spotlight test in both directions


@pytest.mark.criterion(4)
def test_spreading_family_vanishes(runs, note):
    spot = runs["spreading_euclidean"].payload["spotlight"]
    ratio = spot["lp_last"] / spot["lp_first"]
    note(f"spreading |u_K|/|u_1| = {ratio:.3f}")
    assert spot["vanishing"]
    assert ratio < 0.1


@pytest.mark.criterion(4)
@pytest.mark.parametrize("name", ["runaway_euclidean", "runaway_perturbed"])
def test_runaway_bump_does_not_vanish(runs, name, note):
    spot = runs[name].payload["spotlight"]
    note(f"{name} mass spread {spot['mass_spread']:.1e}")
    assert not spot["vanishing"]
    assert spot["mass_spread"] < 0.02


@pytest.mark.criterion(4)
def test_spotlight_inequality_with_one_constant_per_model(runs, note):
    per_model: dict[str, float] = {}
    for name, rf in runs.items():
        kind = rf.config["manifold"]["kind"]
        per_model[kind] = max(per_model.get(kind, 0.0), rf.payload["spotlight"]["embedding_constant"])
    for name, rf in runs.items():
        scn = rf.artifacts.scenario
        C = per_model[rf.config["manifold"]["kind"]]
        p = scn.params.p
        K = scn.seq.k_max
        for k in (1, K // 2, K):
            u = scn.seq[k]
            mass = spotlight_scan(scn.integ, u, p)[1]
            lhs = scn.integ.lp_power(u, p)
            rhs = C * scn.integ.h12_norm(u) ** 2 * mass ** (1 - 2 / p)
            assert lhs <= rhs * (1 + 1e-12), (name, k)
    note(", ".join(f"C[{k}] = {v:.3f}" for k, v in sorted(per_model.items())))
    assert all(0 < v < np.inf for v in per_model.values())


# 5. Single-bump reconstruction


@pytest.mark.criterion(5)
@pytest.mark.parametrize("name", ["runaway_euclidean", "runaway_perturbed"])
def test_single_bump_reconstruction(runs, name, note):
    rf = runs[name]
    scn, report = rf.artifacts.scenario, rf.artifacts.report
    assert len(report.bubbles) == 1
    b = report.bubbles[0]
    K = scn.seq.k_max
    u = scn.seq[K]
    profile_err = scn.integ.h12_norm(b.W(K) - u) / scn.integ.h12_norm(u)
    at_k = [t["lp_residual"] for t in report.traces if t["k"] == K]
    residual_ratio = at_k[-1] / at_k[0]
    flat = b.diagnostics["metric_flatness"]
    note(f"{name} profile {profile_err:.1e}, residual {residual_ratio:.1e}, flatness {flat:.1e}")
    assert profile_err <= 0.02
    assert residual_ratio <= 0.05
    if name == "runaway_perturbed":
        assert flat <= 1e-3


# 6. Two-bubble decoupling


@pytest.mark.criterion(6)
def test_two_bubbles_decouple(runs, note):
    rf = runs["two_bumps_euclidean"]
    d = rf.payload["decoupling"]
    note(f"off-diagonal {d['off_diagonal_relative']:.1e}")
    assert len(rf.payload["bubbles"]) == 2
    assert d["off_diagonal_relative"] <= 0.01
    assert d["probes_monotone"]
    for trace in d["probe_traces"].values():
        vals = [t["h12_sq"] for t in trace]
        assert np.all(np.diff(vals) <= 0)


# 7. Energy identities on every shipped scenario


@pytest.mark.criterion(7)
@pytest.mark.parametrize("name", SCENARIOS)
def test_energy_identities(runs, name, note):
    rf = runs[name]
    e = rf.payload["energy"]
    p2 = max((b["p2_discrepancy"] for b in e["bubbles"]), default=0.0)
    p3 = max((b["p3_discrepancy"] for b in e["bubbles"]), default=0.0)
    note(f"{name} {p2:.0e}/{p3:.0e}/{e['plancherel_slack_relative']:.0e}/{e['brezis_lieb_relative']:.0e}")
    assert rf.status == "pass", rf.error
    assert p2 <= 0.02
    assert p3 <= 0.02
    assert e["plancherel_slack_relative"] >= -0.01
    assert e["brezis_lieb_relative"] <= 0.03


# 8. Gluing validator


@pytest.mark.criterion(8)
def test_gluing_validator_accepts_lattice(note):
    report = validate_gluing_data(lattice_gluing())
    worst = max(report.residuals.values())
    note(f"lattice residual {worst:.1e}")
    assert report.ok
    assert worst < 1e-10


@pytest.mark.criterion(8)
@pytest.mark.parametrize("condition", sorted(VIOLATIONS))
def test_gluing_validator_names_violation(condition):
    report = validate_gluing_data(VIOLATIONS[condition]())
    assert not report.ok
    assert set(report.failed_conditions) == {condition}
    assert all(condition in f["condition"] for f in report.failures)


# 9. Cocompact reduction


@pytest.mark.criterion(9)
def test_cocompact_reduction(runs, note):
    c = runs["lattice_cocompact"].payload["cocompact"]
    note(
        f"oscillation {c['transition_oscillation']:.0e}, flatness {c['metric_flatness']:.0e}, "
        f"chart distance {c['chart_distance_error']:.0e}, deviation {c['max_deviation']:.0e}"
    )
    assert c["transition_oscillation"] < 1e-12
    assert c["metric_flatness"] < 1e-8
    assert c["chart_distance_error"] < 0.01
    assert c["max_deviation"] < 1e-8


# 10. Numerical hygiene


def _norms(payload) -> dict:
    out = {}
    wl = payload["weak_limit"]
    out["weak_limit_h12"] = wl["h12_norm"]
    out["weak_limit_lp"] = wl["lp_norm"]
    for key in ("limsup_u_h12_sq", "weak_limit_h12_sq", "weak_limit_lp_p"):
        out[key] = payload["energy"][key]
    for key in ("lp_first", "lp_last"):
        out[key] = payload["spotlight"][key]
    for b in payload["bubbles"]:
        for key in ("h12_sq", "lp_p", "equivalent_norm"):
            out[f"bubble{b['index']}_{key}"] = b[key]
    return out


@pytest.mark.criterion(10)
@pytest.mark.parametrize("name", ["runaway_euclidean", "fixed_hyperbolic"])
def test_grid_doubling(runs, name, note):
    base = runs[name]
    fine = run_decomposition(_config(name, grid_res=2 * base.config["params"]["grid_res"]))
    a, b = _norms(base.payload), _norms(fine.payload)
    assert a.keys() == b.keys()
    worst = max(_rel(b[k], a[k]) if abs(a[k]) > 1e-12 else abs(b[k]) for k in a)
    note(f"{name} grid doubling {worst:.1e}")
    assert worst < 0.01


@pytest.mark.criterion(10)
@pytest.mark.parametrize("name", ["runaway_euclidean", "two_bumps_euclidean"])
def test_i_max_doubling(runs, name, note):
    rf = runs[name]
    scn, report = rf.artifacts.scenario, rf.artifacts.report
    K = scn.seq.k_max
    worst = 0.0
    for b in report.bubbles:
        wide = build_bubble(scn.seq, scn.integ, b.core, scn.params, index=b.index, i_max=2 * scn.params.i_max)
        worst = max(worst, _rel(scn.integ.h12_norm(wide.W(K)), scn.integ.h12_norm(b.W(K))))
    note(f"{name} I_max doubling {worst:.1e}")
    assert report.bubbles
    assert worst < 0.01


@pytest.mark.criterion(10)
@pytest.mark.parametrize("name", ["runaway_euclidean", "fixed_hyperbolic"])
def test_reports_are_byte_identical(runs, name):
    again = run_decomposition(_config(name))
    assert again.deterministic_bytes() == runs[name].deterministic_bytes()
