import numpy as np
import pytest

from profiledecomp.covering import make_grid
from profiledecomp.decomposition import (
    ExtractionParams,
    exponent_interval,
    extract_profiles,
    sobolev_exponent,
    spotlight_scan,
    vanishing_test,
    verify_decoupling,
    verify_energy_identities,
)
from profiledecomp.funcspace import Bump
from profiledecomp.scenarios import ScenarioConfig, build_scenario

SMALL = {"k_max": 32, "i_max": 12, "grid_res": 32}


def small_scenario(sequence: dict, p: float = 3.0, manifold: str = "euclidean", **params):
    cfg = ScenarioConfig.model_validate(
        {
            "name": "small",
            "manifold": {"kind": manifold},
            "sequence": sequence,
            "params": {"p": p, **SMALL, **params},
        }
    )
    return build_scenario(cfg)


def _run(scn):
    report = extract_profiles(scn.seq, scn.integ, scn.params)
    verify_energy_identities(report, scn.seq, scn.integ)
    verify_decoupling(report, scn.integ)
    return report


@pytest.fixture(scope="module")
def runaway():
    scn = small_scenario(
        {"kind": "runaway-bump", "bumps": [{"center": [0.1, 0.05], "radius": 0.75, "velocity": [1.44, 0.0]}]}
    )
    return scn, _run(scn)


@pytest.fixture(scope="module")
def two_bumps():
    scn = small_scenario(
        {
            "kind": "multi-bump",
            "bumps": [
                {"center": [0.1, 0.05], "radius": 0.75, "velocity": [1.44, 0.0]},
                {"center": [-0.1, 2.93], "radius": 0.75, "amplitude": 0.7, "velocity": [-1.44, 0.0]},
            ],
        }
    )
    return scn, _run(scn)


def test_exponent_interval():
    assert sobolev_exponent(2) == float("inf")
    assert sobolev_exponent(3) == 6.0
    assert exponent_interval(2) == "(2, ∞)"
    assert exponent_interval(3) == "(2, 6)"


@pytest.mark.parametrize("p,N,interval", [(2.0, 2, "(2, ∞)"), (6.0, 3, "(2, 6)"), (1.5, 3, "(2, 6)")])
def test_params_reject_p_outside_interval(p, N, interval):
    with pytest.raises(ValueError, match=interval.replace("(", r"\(").replace(")", r"\)")):
        ExtractionParams(p=p).check(N)


def test_spotlight_scan_finds_nearest_centre(runaway):
    scn, _ = runaway
    f = Bump(scn.model, [0.7, 0.05], 0.75)
    idx, mass, _ = spotlight_scan(scn.integ, f, 3.0)
    assert np.allclose(scn.net.centers[idx], [0.72, 0.0])
    assert mass > 0


def test_runaway_extracts_one_bubble_reproducing_the_sequence(runaway):
    scn, report = runaway
    assert len(report.bubbles) == 1
    b = report.bubbles[0]
    grid = make_grid(2, scn.net.rho, 16)
    for k in b.system.tail():
        X = b.system.chart(k, 0).forward(grid.nodes)
        # W_k is u_k weighted by the partition functions of the system's charts.
        weight = sum(scn.pu.chi(int(c), X)[0] for c in b.system.order[k])
        assert np.max(np.abs(b.W(k)(X) - weight * scn.seq[k](X))) < 1e-10
    # Generator oracle: the profile is the bump itself.
    gen = scn.integ.h12_norm(scn.seq[scn.seq.k_max]) ** 2
    assert b.h12_sq == pytest.approx(gen, rel=1e-6)


def test_runaway_residual_vanishes(runaway):
    _, report = runaway
    final = [t["lp_residual"] for t in report.traces if t["stage"] == 1]
    first = [t["lp_residual"] for t in report.traces if t["stage"] == 0]
    assert max(final) < 1e-6 * max(first)
    assert len(report.traces) == 2 * 32


def test_runaway_energy_identities(runaway):
    _, report = runaway
    e = report.energy
    assert e["bubbles"][0]["p2_discrepancy"] < 1e-8
    assert e["bubbles"][0]["p3_discrepancy"] < 1e-8
    assert abs(e["plancherel_slack_relative"]) < 1e-8
    assert e["brezis_lieb_relative"] < 1e-8


def test_runaway_probes_decay(runaway):
    _, report = runaway
    trace = report.decoupling["probe_traces"]["1"]
    vals = [t["h12_sq"] for t in trace]
    assert report.decoupling["probes_monotone"]
    assert vals[-1] < 0.1 * vals[0]


def test_bubble_vanishes_off_retained_indices(runaway):
    _, report = runaway
    b = report.bubbles[0]
    missing = [k for k in range(1, 33) if k not in b.system.retained]
    for k in missing:
        assert b.W(k).support == []


def test_two_bubbles_decouple(two_bumps):
    _, report = two_bumps
    assert len(report.bubbles) == 2
    d = report.decoupling
    assert d["off_diagonal_relative"] < 0.01
    amps = sorted(b.h12_sq for b in report.bubbles)
    assert amps[0] == pytest.approx(0.49 * amps[1], rel=1e-6)


def test_fixed_bump_is_its_own_weak_limit():
    scn = small_scenario({"kind": "fixed", "bumps": [{"center": [0.0, 0.0], "radius": 1.0}]})
    report = _run(scn)
    assert report.bubbles == []
    K = scn.seq.k_max
    assert scn.integ.h12_norm(scn.seq[K] - report.weak_limit) < 1e-10
    assert report.energy["brezis_lieb_relative"] < 1e-10


def test_spreading_sequence_vanishes():
    scn = small_scenario({"kind": "spreading", "bumps": [{"center": [0.0, 0.0], "radius": 0.3}]}, p=6.0)
    first = spotlight_scan(scn.integ, scn.seq[1], 6.0)[1]
    vanishing, trace, c = vanishing_test(scn.integ, scn.seq, 6.0, 1e-3 * first)
    assert vanishing
    assert np.all(np.diff(trace) < 0)
    assert c > 0


def test_extraction_is_deterministic(runaway):
    scn, report = runaway
    again = extract_profiles(scn.seq, scn.integ, scn.params)
    assert again.traces == report.traces
    assert again.bubbles[0].h12_sq == report.bubbles[0].h12_sq
