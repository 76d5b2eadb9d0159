import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from profiledecomp.geometry import (
    EuclideanModel,
    GeometryError,
    HyperbolicModel,
    MetricBump,
    PerturbedEuclideanModel,
    build_model,
    integrate_geodesic,
    make_normal_chart,
    metric_derivatives,
    minkowski,
    pullback_metric_at,
    transition_derivative_bounds,
)

from .conftest import perturbed_model, random_points

coords = arrays(np.float64, 2, elements=st.floats(-3, 3))
tangents = arrays(np.float64, 2, elements=st.floats(-2.5, 2.5))


def _frame(model, x):
    return model.canonical_frame(x)


@settings(max_examples=60, deadline=None)
@given(coords, tangents)
def test_hyperbolic_exp_log_roundtrip(c, v):
    m = HyperbolicModel(2)
    x = m.lift(c)[0]
    q = m.exp(x, _frame(m, x), v[None])
    assert abs(minkowski(q, q)[0] + 1) < 1e-9 * max(1.0, q[0, 0] ** 2)
    back = m.log(x, _frame(m, x), q)
    assert np.allclose(back[0], v, atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(coords, coords)
def test_hyperbolic_distance_matches_arccosh(a, b):
    m = HyperbolicModel(2)
    x, q = m.lift(a)[0], m.lift(b)[0]
    closed = np.arccosh(max(1.0, -float(minkowski(x, q))))
    assert abs(m.distance(x, q)[0] - closed) < 1e-6


def test_hyperbolic_exp_matches_geodesic_ode():
    m = HyperbolicModel(2)
    rng = np.random.default_rng(1)
    x = random_points(m, rng, 1)[0]
    v = rng.uniform(-1.5, 1.5, size=(10, 2))
    ref = integrate_geodesic(m, x, _frame(m, x), v, n_steps=800)
    assert np.max(np.abs(m.exp(x, _frame(m, x), v) - ref)) < 1e-8


def test_hyperbolic_exp_beyond_cap_rejected():
    m = HyperbolicModel(2)
    o = m.origin()
    with pytest.raises(GeometryError):
        m.exp(o, _frame(m, o), np.array([[11.0, 0.0]]))


def test_hyperbolic_rejects_points_off_sheet():
    m = HyperbolicModel(2)
    with pytest.raises(GeometryError):
        m.check_point(np.array([1.0, 1.0, 0.0]))


@settings(max_examples=40, deadline=None)
@given(coords, tangents)
def test_euclidean_exp_is_translation(c, v):
    m = EuclideanModel(2)
    q = m.exp(c, _frame(m, c), v[None])
    assert np.allclose(q[0], c + v)
    assert np.allclose(m.log(c, _frame(m, c), q)[0], v)


def test_perturbed_far_from_bump_is_flat():
    m = perturbed_model()
    x = np.array([6.0, 1.0])
    v = np.array([[1.0, -0.5], [0.3, 0.7]])
    assert np.allclose(m.exp(x, _frame(m, x), v), x + v, atol=1e-12)


def test_perturbed_exp_log_roundtrip_through_bump():
    m = perturbed_model()
    rng = np.random.default_rng(3)
    X = rng.uniform(-2.5, 2.5, size=(30, 2))
    V = rng.uniform(-1.5, 1.5, size=(30, 2))
    F = m.canonical_frames(X)
    Q = m.exp(X, F, V)
    assert np.max(np.abs(m.log(X, F, Q) - V)) < 1e-8


def test_perturbed_distance_agrees_with_polyline():
    m = perturbed_model()
    x, q = np.array([-1.2, 0.3]), np.array([1.0, -0.4])
    d = m.distance(x, q)[0]
    poly = m.polyline_distance(x, q, n_interior=40)
    # The polyline is an upper bound that converges to the geodesic length.
    assert d <= poly + 1e-6
    assert poly - d < 2e-3 * d
    assert d >= np.linalg.norm(q - x)


def test_perturbed_exp_matches_finer_integration():
    m = perturbed_model()
    x = np.array([-0.5, 0.2])
    v = np.array([[1.2, 0.4]])
    fine = integrate_geodesic(m, x, _frame(m, x), v, n_steps=4000)
    assert np.max(np.abs(m.exp(x, _frame(m, x), v) - fine)) < 1e-8


def test_perturbed_injectivity_floor_from_curvature():
    m = perturbed_model()
    assert m.curvature_bound > 0
    assert m.injectivity_floor == pytest.approx(np.pi / np.sqrt(m.curvature_bound))
    assert m.injectivity_floor > 8 * 0.8


@pytest.mark.parametrize("amplitude,radius", [(-0.1, 1.0), (0.1, 0.0)])
def test_perturbed_rejects_bad_bump(amplitude, radius):
    with pytest.raises(GeometryError):
        PerturbedEuclideanModel(2, MetricBump((0.0, 0.0), radius, amplitude))


def test_build_model_kinds():
    assert isinstance(build_model("euclidean", 2), EuclideanModel)
    assert isinstance(build_model("hyperbolic", 3), HyperbolicModel)
    pert = build_model("perturbed-euclidean", 2, {"radius": 2.0, "amplitude": 0.1})
    assert isinstance(pert, PerturbedEuclideanModel)
    with pytest.raises(GeometryError):
        build_model("perturbed-euclidean", 2)
    with pytest.raises(GeometryError):
        build_model("sphere", 2)


@pytest.mark.parametrize("kind", ["euclidean", "hyperbolic", "perturbed-euclidean"])
def test_chart_origin_metric_is_identity(models, kind):
    m = models[kind]
    y = random_points(m, np.random.default_rng(5), 1, spread=1.5)[0]
    for seed in (None, 7):
        chart = make_normal_chart(m, y, 0.8, seed=seed)
        g = pullback_metric_at(chart, np.zeros((1, 2)))[0]
        assert np.max(np.abs(g - np.eye(2))) < 1e-6
        dg = metric_derivatives(chart, np.zeros((1, 2)))
        assert np.max(np.abs(dg)) < 1e-3


def test_chart_roundtrip_and_radius_check(models):
    m = models["hyperbolic"]
    y = m.lift([0.5, -0.2])[0]
    chart = make_normal_chart(m, y, 0.8)
    xi = np.array([[0.3, 0.1], [-0.5, 0.2]])
    assert np.allclose(chart.inverse(chart.forward(xi)), xi, atol=1e-10)
    with pytest.raises(GeometryError):
        make_normal_chart(m, y, 20.0)


def test_seeded_frames_are_deterministic_and_orthonormal(models):
    m = models["hyperbolic"]
    y = m.lift([0.4, 0.9])[0]
    a, b = m.seeded_frame(y, 3), m.seeded_frame(y, 3)
    assert np.array_equal(a, b)
    g = m.ambient_metric(y)[0]
    assert np.allclose(a.T @ g @ a, np.eye(2), atol=1e-12)
    assert not np.allclose(a, m.seeded_frame(y, 4))


def test_euclidean_transition_derivatives_are_exact():
    m = EuclideanModel(2)
    charts = [make_normal_chart(m, c, 0.8) for c in ([0.0, 0.0], [0.72, 0.0], [0.0, 0.72])]
    c1, c2 = transition_derivative_bounds(m, charts, 0.8, n_samples=50)
    assert c1 == pytest.approx(1.0, abs=1e-8)
    assert c2 < 1e-5


def test_distance_to_centers_matches_pairwise(models):
    rng = np.random.default_rng(2)
    for m in models.values():
        C = random_points(m, rng, 4, spread=1.5)
        X = random_points(m, rng, 6, spread=1.5)
        d, _ = m.distances_to_centers(C, X)
        for j, c in enumerate(C):
            assert np.allclose(d[:, j], m.distance(X, c), atol=1e-9)
