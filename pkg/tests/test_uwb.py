import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from pedtwin.tdma import build_schedule, reference_schedule
from pedtwin.uwb import (
    NOISELESS,
    AnchorSet,
    DegenerateGeometryError,
    InsufficientRangesError,
    LocalizationError,
    RangeMeasurement,
    RangeNoiseModel,
    _objective,
    accuracy_benchmark,
    default_anchors,
    dump_anchors,
    load_anchors,
    localization_error,
    mean_localization_error,
    multilaterate,
    simulate_ranges,
)
from pedtwin.world import turning_walk_scenario

SQUARE = AnchorSet.from_points([(0, 0), (10, 0), (0, 10)])


def _ranges(distances, anchors=SQUARE):
    return [RangeMeasurement(i, d, 0.0) for i, d in zip(anchors.ids, distances)]


def _triangle_point(rng, anchors):
    a, b, c = anchors.positions[:3]
    u, v = rng.random(2)
    if u + v > 1:
        u, v = 1 - u, 1 - v
    return a + u * (b - a) + v * (c - a)


# ---------------------------------------------------------------- anchors


def test_anchor_validation():
    with pytest.raises(DegenerateGeometryError):
        AnchorSet.from_points([(0, 0), (1, 0)])
    with pytest.raises(DegenerateGeometryError):
        AnchorSet.from_points([(0, 0), (0, 0), (1, 1)])
    with pytest.raises(DegenerateGeometryError):
        AnchorSet.from_points([(0, 0), (1, 1), (2, 2)])


def test_anchor_file_round_trip():
    anchors = default_anchors()
    again = load_anchors(dump_anchors(anchors))
    assert again.ids == anchors.ids
    np.testing.assert_array_equal(again.positions, anchors.positions)


# ---------------------------------------------------------------- ranging


def test_noiseless_ranges_are_geometric():
    ms = simulate_ranges((3, 4), SQUARE, NOISELESS, 0)
    assert [m.distance for m in ms] == [5.0, math.sqrt(65), math.sqrt(45)]
    assert all(m.valid for m in ms)


def test_full_dropout_invalidates_everything():
    ms = simulate_ranges((3, 4), SQUARE, RangeNoiseModel(sigma=0.05, dropout_p=1.0), 0)
    assert not any(m.valid for m in ms)


def test_ranging_noise_has_configured_std():
    rng = np.random.default_rng(11)
    truth = np.array([3.0, 4.0])
    exact = np.hypot(*(SQUARE.positions - truth).T)
    draws = np.array([[m.distance for m in simulate_ranges(truth, SQUARE, RangeNoiseModel(0.05), rng)]
                      for _ in range(10_000)])
    std = (draws - exact).std(axis=0, ddof=1)
    assert np.all((0.045 <= std) & (std <= 0.055))


def test_nlos_adds_positive_bias():
    rng = np.random.default_rng(2)
    truth = np.array([3.0, 4.0])
    exact = np.hypot(*(SQUARE.positions - truth).T)
    noise = RangeNoiseModel(sigma=0.0, nlos_bias=0.3, nlos_p=1.0)
    ms = simulate_ranges(truth, SQUARE, noise, rng)
    np.testing.assert_allclose([m.distance for m in ms], exact + 0.3)


def test_ranging_is_deterministic_per_seed():
    a = simulate_ranges((1, 2), SQUARE, RangeNoiseModel(0.1, 0.2, 0.3, 0.2), 99)
    b = simulate_ranges((1, 2), SQUARE, RangeNoiseModel(0.1, 0.2, 0.3, 0.2), 99)
    assert a == b


# ---------------------------------------------------------------- solver


def test_recovers_known_point():
    est = multilaterate(_ranges([5.0, 8.062258, 6.708204]), SQUARE)
    assert localization_error(est, (3, 4)) < 1e-6
    assert est.n_ranges_used == 3
    assert est.residual_rms >= 0


def test_tag_at_anchor():
    est = multilaterate(_ranges([0.0, 10.0, 10.0]), SQUARE)
    assert localization_error(est, (0, 0)) < 1e-6


def test_insufficient_ranges():
    ms = _ranges([5.0, 8.0, 6.7])
    ms[0] = RangeMeasurement(ms[0].anchor_id, 5.0, 0.0, valid=False)
    with pytest.raises(InsufficientRangesError):
        multilaterate(ms, SQUARE)


def test_collinear_used_anchors_rejected():
    anchors = AnchorSet.from_points([(0, 0), (10, 0), (20, 0), (0, 10)])
    ms = [RangeMeasurement(i, 5.0, 0.0, valid=(i != "A3")) for i in anchors.ids]
    with pytest.raises(DegenerateGeometryError):
        multilaterate(ms, anchors)


def test_unknown_or_repeated_anchor_rejected():
    with pytest.raises(LocalizationError):
        multilaterate([RangeMeasurement("A0", 1, 0), RangeMeasurement("A0", 1, 0), RangeMeasurement("A1", 1, 0)],
                      SQUARE)
    with pytest.raises(LocalizationError):
        multilaterate([RangeMeasurement("A0", 1, 0), RangeMeasurement("A1", 1, 0), RangeMeasurement("Z", 1, 0)],
                      SQUARE)


def test_monte_carlo_error_band():
    rng = np.random.default_rng(5)
    errs = []
    for _ in range(1000):
        truth = _triangle_point(rng, SQUARE)
        errs.append(localization_error(multilaterate(simulate_ranges(truth, SQUARE, RangeNoiseModel(0.05), rng),
                                                     SQUARE), truth))
    assert 0.03 <= np.mean(errs) <= 0.12


def _mc_mean_error(sigma, trials=1000, seed=3):
    rng = np.random.default_rng(seed)
    anchors = default_anchors()
    errs = []
    for _ in range(trials):
        truth = _triangle_point(rng, anchors)
        errs.append(localization_error(multilaterate(simulate_ranges(truth, anchors, RangeNoiseModel(sigma), rng),
                                                     anchors), truth))
    return float(np.mean(errs))


def test_mean_error_grows_with_sigma():
    errs = [_mc_mean_error(s) for s in (0.01, 0.05, 0.10)]
    assert errs == sorted(errs)


# ---------------------------------------------------------------- properties

pt = st.tuples(st.floats(-50, 50), st.floats(-50, 50))


def _area(p):
    (ax, ay), (bx, by), (cx, cy) = p
    return abs((bx - ax) * (cy - ay) - (cx - ax) * (by - ay)) / 2


@st.composite
def geometries(draw):
    anchors = draw(st.lists(pt, min_size=3, max_size=3))
    assume(_area(anchors) > 5.0)
    # keep the conditioning reasonable: no sliver triangles
    sides = [math.dist(anchors[i], anchors[(i + 1) % 3]) for i in range(3)]
    assume(_area(anchors) / max(sides) ** 2 > 0.05)
    truth = draw(pt)
    return AnchorSet.from_points(anchors), np.array(truth)


@given(geometries())
def test_exact_recovery(geom):
    anchors, truth = geom
    est = multilaterate(simulate_ranges(truth, anchors, NOISELESS, 0), anchors)
    assert localization_error(est, truth) < 1e-6


@given(geometries(), st.integers(0, 2**31))
def test_estimate_is_a_local_minimum(geom, seed):
    anchors, truth = geom
    ms = simulate_ranges(truth, anchors, RangeNoiseModel(0.05), seed)
    est = multilaterate(ms, anchors)
    r = np.array([m.distance for m in ms])
    f0 = _objective(est.position, anchors.positions, r)
    for d in ([0.01, 0], [-0.01, 0], [0, 0.01], [0, -0.01]):
        assert _objective(est.position + d, anchors.positions, r) >= f0 - 1e-12


@given(geometries(), st.floats(0, 2 * math.pi), pt)
def test_rigid_motion_equivariance(geom, theta, shift):
    anchors, truth = geom
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    move = lambda p: np.asarray(p) @ rot.T + np.asarray(shift)  # noqa: E731
    ms = simulate_ranges(truth, anchors, RangeNoiseModel(0.05), 4)
    moved = AnchorSet(anchors.ids, move(anchors.positions))
    a = multilaterate(ms, anchors).position
    b = multilaterate(ms, moved).position
    assert localization_error(move(a), b) < 1e-6


@given(pt, pt)
def test_error_metric_properties(p, q):
    assert localization_error(p, q) == localization_error(q, p)
    assert (localization_error(p, q) == 0) == (tuple(p) == tuple(q))
    assert localization_error(p, p) == 0


def test_localization_error_examples():
    assert localization_error((3, 4), (3, 4)) == 0.0
    assert localization_error((0, 0), (3, 4)) == 5.0


def test_batch_mean_matches_arithmetic_mean():
    rng = np.random.default_rng(8)
    truths = [_triangle_point(rng, SQUARE) for _ in range(500)]
    ests = [multilaterate(simulate_ranges(t, SQUARE, RangeNoiseModel(0.05), rng), SQUARE) for t in truths]
    per = [localization_error(e, t) for e, t in zip(ests, truths)]
    assert abs(mean_localization_error(ests, truths) - sum(per) / len(per)) < 1e-12


# ---------------------------------------------------------------- benchmark


def test_benchmark_single_user_frequency():
    sc = turning_walk_scenario()
    sched, period = reference_schedule(["ped000"])
    (row,) = accuracy_benchmark(sc, default_anchors(), RangeNoiseModel(0.05), sched, 1, period)
    assert row.scenario_label == "single"
    assert row.freq_hz == pytest.approx(10.0)
    assert 0.03 <= row.mean_error <= 0.12


def test_benchmark_two_user_frequency():
    sc = turning_walk_scenario()
    sched, period = reference_schedule(["ped000", "ped001"])
    (row,) = accuracy_benchmark(sc, default_anchors(), RangeNoiseModel(0.05), sched, 1, period)
    assert row.scenario_label == "two_users"
    assert row.freq_hz == pytest.approx(0.3, abs=0.01)


def test_benchmark_noiseless_is_exact():
    sc = turning_walk_scenario()
    (row,) = accuracy_benchmark(sc, default_anchors(), NOISELESS, build_schedule(["ped000"], 0.1), 0, 0.1)
    assert row.mean_error < 1e-6
