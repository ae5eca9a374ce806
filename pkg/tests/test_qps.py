import numpy as np
import pytest

from qpskit.core import DEFAULT_CONSTANTS, FWHM_PER_SIGMA, scaled_array, sensor_centroid, triangle_array
from qpskit.errors import DegenerateGeometry
from qpskit.qps import (
    ISO_LEVELS,
    GridSpec,
    SolverConfig,
    _forward,
    _starts,
    _whitener,
    accuracy_map,
    forward_jacobian,
    forward_observables,
    localization_fwhm_at,
    localize,
    numeric_jacobian,
)
from qpskit.telegraph import PointDefect, defect_signatures


def test_forward_zero_on_perpendicular_plane(sensors):
    s = sensors[1]
    r = s.position + 150.0 * s.frame.x_hat + 40.0 * s.frame.y_hat
    F = forward_observables(r, sensors, -1.0)
    assert F[2] == pytest.approx(0.0, abs=1e-12)


def test_forward_perpendicular_field_second_order(sensors):
    s = sensors[0]
    blind = np.cross(s.n_par, s.n_perp)
    F = forward_observables(s.position + 800.0 * blind, sensors, 1.0)
    e = 14399645.468667816 / (5.7 * 800.0**2)
    assert abs(F[1]) <= s.d_perp * e**2 / (2 * s.strain_magnitude) + 1e-12
    assert abs(F[1]) < 1e-2 * s.d_perp * e


def test_forward_matches_simulated_single_flip(sensors, rng):
    for r in rng.uniform(-600, 600, (10, 3)):
        sig = defect_signatures(sensors, [PointDefect(0, r, 0.1, -1.0)])[0]
        np.testing.assert_allclose(forward_observables(r, sensors, -1.0), sig, atol=1e-12)


def test_degenerate_geometry(sensors):
    with pytest.raises(DegenerateGeometry):
        forward_observables(sensors[0].position + [0.1, 0, 0], sensors)


@pytest.mark.parametrize("centered", [False, True])
def test_jacobian_spot_checks(sensors, rng, centered):
    for r in rng.uniform(-500, 500, (10, 3)):
        _, J = forward_jacobian(r, sensors, -1.0, centered=centered)
        Jn = numeric_jacobian(r, sensors, -1.0, centered=centered)
        np.testing.assert_allclose(J, Jn, rtol=1e-6, atol=1e-9 * np.abs(J).max())


def test_centered_model_is_odd(sensors, rng):
    r = rng.uniform(-400, 400, (20, 3))
    np.testing.assert_allclose(forward_observables(r, sensors, 1.0, centered=True),
                               -forward_observables(r, sensors, -1.0, centered=True), atol=1e-12)


def test_noiseless_round_trip(sensors):
    c = sensor_centroid(sensors)
    r0 = c + np.array([180.0, -120.0, 200.0])
    r0 = c + 300.0 * (r0 - c) / np.linalg.norm(r0 - c)
    v = forward_observables(r0, sensors, -1.0)
    res = localize(v, np.full(6, 0.1), sensors)
    assert np.linalg.norm(res.position - r0) < 1e-3
    assert res.objective_min < 1e-12
    assert res.dof == 3
    assert res.charge_polarity_assumed == -1.0
    assert res.passes()


def test_result_invariants(sensors):
    v = forward_observables([100.0, 250.0, -150.0], sensors, -1.0)
    res = localize(v + 0.3, np.ones(6), sensors)
    w = np.linalg.eigvalsh(res.covariance)
    assert w.min() >= 0
    assert np.all(np.diff(res.sigma_principal) >= 0)
    assert res.sigma_3d_bar == pytest.approx(np.prod(res.sigma_principal) ** (1 / 3))
    assert res.fwhm == pytest.approx(FWHM_PER_SIGMA * res.sigma_3d_bar)
    assert 0 <= res.p_value <= 1


def test_merged_cluster_rejected(sensors):
    a = forward_observables([150.0, 200.0, 120.0], sensors, -1.0)
    b = forward_observables([-250.0, -50.0, -180.0], sensors, -1.0)
    res = localize(a + b, np.full(6, 0.2), sensors)
    assert res.p_value < 0.05 and not res.passes()


def test_polarity_symmetry(sensors):
    v = forward_observables([120.0, -90.0, 210.0], sensors, 1.0, centered=True) + 0.05
    a = localize(v, np.full(6, 0.5), sensors, SolverConfig(charges=(1.0,), centered=True))
    b = localize(-v, np.full(6, 0.5), sensors, SolverConfig(charges=(-1.0,), centered=True))
    np.testing.assert_allclose(a.position, b.position, atol=1e-6)


def test_objective_not_above_any_start(sensors):
    v = forward_observables([-60.0, 140.0, 90.0], sensors, -1.0) + np.array([0.4, -0.2, 0.1, 0.3, -0.5, 0.2])
    cfg = SolverConfig()
    res = localize(v, np.ones(6), sensors, cfg)
    valid, W = _whitener(v, np.ones(6))
    P = _starts(sensors, cfg)
    for q in cfg.charges:
        for s in (1, -1):
            F, _ = _forward(P, sensors, q, DEFAULT_CONSTANTS)
            cost = np.sum(((s * F - v) @ W.T) ** 2, axis=1)
            assert res.objective_min <= cost.min() + 1e-12


def test_too_few_components(sensors):
    v = np.array([1.0, 2.0, np.nan, np.nan, 3.0, np.nan])
    with pytest.raises(ValueError):
        localize(v, np.ones(6), sensors)


def test_full_covariance_matches_diagonal(sensors):
    v = forward_observables([200.0, 100.0, -100.0], sensors, -1.0) + 0.2
    sig = np.array([0.5, 1.0, 0.7, 0.4, 1.2, 0.9])
    a = localize(v, sig, sensors)
    b = localize(v, np.diag(sig**2), sensors)
    np.testing.assert_allclose(a.position, b.position, atol=1e-6)
    assert a.objective_min == pytest.approx(b.objective_min, rel=1e-8)


def test_whitener_rejects_indefinite():
    with pytest.raises(ValueError):
        _whitener(np.ones(2), np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_fwhm_formula_and_scaling(sensors):
    assert FWHM_PER_SIGMA == pytest.approx(2.35482, abs=1e-5)
    r = [60.0, 80.0, 150.0]
    a = localization_fwhm_at(r, sensors, 1.0)
    b = localization_fwhm_at(r, sensors, 2.5)
    assert b / a == pytest.approx(2.5, rel=1e-12)


def test_fwhm_increases_along_ray(sensors):
    c = sensor_centroid(sensors)
    d = np.array([0.3, -0.5, 0.8])
    d /= np.linalg.norm(d)
    diameter = 2 * 200.0 / np.sqrt(3)
    radii = np.linspace(2 * diameter, 10 * diameter, 40)
    vals = [localization_fwhm_at(c + t * d, sensors, 1.0) for t in radii]
    assert np.all(np.diff(vals) > 0)


def test_accuracy_map_small_grid(sensors):
    grid = GridSpec.cube(sensor_centroid(sensors), 400.0, 21)
    amap = accuracy_map(sensors, 1.0, grid)
    assert amap.fwhm_values.shape == (21, 21, 21)
    regions = [amap.region(lv) for lv in ISO_LEVELS]
    assert np.all(regions[1] <= regions[0]) and np.all(regions[2] <= regions[1])
    pts = grid.points()
    rng = np.random.default_rng(0)
    for idx in rng.integers(0, 21, (10, 3)):
        want = localization_fwhm_at(pts[tuple(idx)], sensors, 1.0)
        assert amap.fwhm_values[tuple(idx)] == pytest.approx(want, rel=1e-12)


def test_accuracy_map_marks_sensor_voxels():
    sensors = triangle_array(200.0)
    origin = tuple(sensors[0].position - 10.0)
    amap = accuracy_map(sensors, 1.0, GridSpec(origin, 10.0, (3, 3, 3)))
    assert np.isnan(amap.fwhm_values[1, 1, 1])
    assert np.isfinite(amap.fwhm_values[0, 0, 0])


def test_accuracy_map_thread_invariant(sensors, monkeypatch):
    grid = GridSpec.cube(sensor_centroid(sensors), 300.0, 12)
    monkeypatch.setenv("QPSKIT_THREADS", "1")
    a = accuracy_map(sensors, 1.0, grid, chunk=97).fwhm_values
    monkeypatch.setenv("QPSKIT_THREADS", "4")
    b = accuracy_map(sensors, 1.0, grid, chunk=97).fwhm_values
    np.testing.assert_array_equal(a, b)


def test_half_spacing_grows_smallest_region(sensors):
    c = sensor_centroid(sensors)
    grid = GridSpec.cube(c, 150.0, 41)
    full = accuracy_map(sensors, 1.0, grid).volume(1.0)
    half = accuracy_map(scaled_array(sensors, 0.5), 1.0, grid).volume(1.0)
    assert half > full
