import numpy as np
import pytest

from ccmpc.metric import SingularMetric, constant_certificate
from ccmpc.riemann import (
    DiscretePath,
    endpoint_length_gradient,
    geodesic,
    geodesic_batch,
    geodesic_tangents,
    path_energy,
    path_length,
    solve_geodesics,
    straight_path,
)

from oracles import LatticeOracle


@pytest.fixture(scope="module")
def lattice(lv_cert):
    return LatticeOracle(lv_cert, lv_cert.state_box)


def test_euclidean_straight_length():
    eye = constant_certificate(np.eye(2), [[0, 0]], 0.1)
    for p in (1, 4, 16):
        assert path_length(eye, straight_path([0, 0], [3, 4], p)) == pytest.approx(5.0, rel=1e-15)
    two = constant_certificate(0.5 * np.eye(2), [[0, 0]], 0.1)  # M = 2 I
    assert path_length(two, straight_path([0, 0], [3, 4])) == pytest.approx(5 * np.sqrt(2), rel=1e-15)


def test_degenerate_path_has_zero_length_and_energy(lv_cert):
    path = straight_path([1.0, 1.0], [1.0, 1.0])
    assert path_length(lv_cert, path) == 0.0 and path_energy(lv_cert, path) == 0.0


def test_constant_metric_geodesic_is_straight():
    w = np.array([[2.0, 0.6], [0.6, 0.5]])
    cert = constant_certificate(w, [[0, 0]], 0.1)
    x, xs = np.array([0.3, -1.2]), np.array([1.7, 0.4])
    res = geodesic(cert, x, xs, 16)
    assert res.converged
    np.testing.assert_allclose(res.path.nodes, straight_path(x, xs, 16).nodes, atol=1e-8, rtol=0)
    d = x - xs
    assert res.length == pytest.approx(np.sqrt(d @ np.linalg.inv(w) @ d), rel=1e-9)


def test_coincident_endpoints_take_zero_iterations(lv_cert):
    res = geodesic(lv_cert, [0.9, 1.1], [0.9, 1.1])
    assert res.length == 0.0 and res.iterations == 0 and res.converged


def test_energy_history_is_monotone(lv_cert):
    res = geodesic(lv_cert, [0.2, 1.9], [1.8, 0.3])
    assert res.converged
    hist = np.array(res.energy_history)
    assert len(hist) >= 2
    assert np.all(np.diff(hist) <= 1e-12 * hist[0])


def test_geodesic_improves_on_straight_line(lv_cert, rng):
    # the solver minimises discrete energy; length follows up to the uneven node spacing
    for _ in range(10):
        x, xs = rng.uniform(0.1, 2.0, (2, 2))
        res = geodesic(lv_cert, x, xs)
        line = straight_path(x, xs)
        assert res.energy <= path_energy(lv_cert, line) * (1 + 1e-12)
        assert res.length <= path_length(lv_cert, line) * (1 + 1e-4)


def test_example_pair_matches_lattice_oracle(lv_cert, lattice):
    res = geodesic(lv_cert, [0.5, 0.5], [1.5, 1.5], 16)
    oracle = lattice.distance_between(np.array([0.5, 0.5]), np.array([1.5, 1.5]))
    assert abs(res.length - oracle) <= 0.02 * oracle


def test_lattice_paths_never_beat_the_geodesic(lv_cert, lattice, rng):
    # any lattice path is a feasible curve, so up to quadrature error it bounds the geodesic from above
    for _ in range(10):
        a = tuple(int(v) for v in rng.integers(0, 41, 2))
        b = tuple(int(v) for v in rng.integers(0, 41, 2))
        if a == b:
            continue
        res = geodesic(lv_cert, lattice.point(*a), lattice.point(*b))
        assert res.length <= lattice.distance(a, b) * (1 + 2e-3)


def test_refining_segments_changes_length_by_under_one_percent(lv_cert, rng):
    for _ in range(5):
        x, xs = rng.uniform(0.1, 2.0, (2, 2))
        coarse = geodesic(lv_cert, x, xs, 16).length
        fine = geodesic(lv_cert, x, xs, 32).length
        assert abs(fine - coarse) <= 0.01 * fine


def test_tangents_telescope(lv_cert):
    x, xs = np.array([0.4, 1.6]), np.array([1.3, 0.7])
    res = geodesic(lv_cert, x, xs, 8)
    np.testing.assert_allclose(res.path.deltas.sum(axis=0), xs - x, atol=1e-15)
    line = geodesic(constant_certificate(np.eye(2), [[0, 0]], 0.1), x, xs, 8)
    np.testing.assert_allclose(geodesic_tangents(line), np.tile(xs - x, (8, 1)), atol=1e-8)
    zero = DiscretePath(np.tile(x, (5, 1)))
    assert not zero.deltas.any()


def test_iteration_cap_reports_nonconvergence(lv_cert):
    res = geodesic(lv_cert, [0.2, 1.9], [1.8, 0.3], max_iter=1)
    assert not res.converged and res.iterations == 1
    assert np.isfinite(res.length)


def test_batch_matches_single_solves(lv_cert, rng):
    starts = rng.uniform(0.1, 2.0, (4, 2))
    ends = rng.uniform(0.1, 2.0, (4, 2))
    lengths, nodes, conv = geodesic_batch(lv_cert, starts, ends)
    assert conv.all() and nodes.shape == (4, 17, 2)
    for i in range(4):
        assert lengths[i] == pytest.approx(geodesic(lv_cert, starts[i], ends[i]).length, rel=1e-8)


def test_endpoint_gradient_matches_finite_differences(lv_cert):
    x, xs = np.array([1.3, 0.6]), np.array([0.9, 1.2])
    nodes, *_ = solve_geodesics(lv_cert, x, xs)
    g = endpoint_length_gradient(lv_cert, nodes)[0]
    h = 1e-6
    fd = []
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd.append((geodesic(lv_cert, x + e, xs).length - geodesic(lv_cert, x - e, xs).length) / (2 * h))
    np.testing.assert_allclose(g, fd, rtol=1e-3, atol=1e-7)


def test_singular_metric_propagates():
    cert = constant_certificate(np.diag([1.0, 0.0]), [[0, 0]], 0.1)
    with pytest.raises(SingularMetric):
        path_length(cert, straight_path([0, 0], [1, 1]))
