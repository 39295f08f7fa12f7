import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_force_greedy
from symdoqkd.coincidence import (
    CoincidenceConfig,
    DelayHistogram,
    InsufficientDataError,
    car,
    delay_variance,
    find_coincidences,
    histogram_delays,
)


def _hist(counts, first_bin=-80):
    counts = np.asarray(counts, dtype=np.int64)
    return DelayHistogram(192.0, counts, first_bin, int(counts.sum()))


def test_disjoint_ranges_give_nothing():
    coinc, hist = find_coincidences(np.arange(10) * 1e3, 1e9 + np.arange(10) * 1e3)
    assert len(coinc) == 0 and hist.total_pairs == 0


def test_identical_single_events():
    coinc, hist = find_coincidences([5000.0], [5000.0])
    assert len(coinc) == 1 and coinc.delay_ps[0] == 0.0
    assert hist.window_sum(0, 1) == 1


def test_histogram_covers_window():
    cfg = CoincidenceConfig()
    hist = histogram_delays(np.array([-cfg.window_ps, 0.0, cfg.window_ps - 1]), cfg)
    assert len(hist.counts) == 2 * cfg.window_bins + 1
    assert hist.counts.sum() == hist.total_pairs == 3
    assert hist.bin_index[0] == -cfg.window_bins


def test_unsorted_input_rejected():
    with pytest.raises(ValueError):
        find_coincidences([2.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        find_coincidences([1.0], [3.0, 1.0])


def test_config_invariants():
    with pytest.raises(ValueError):
        CoincidenceConfig(bin_ps=0.0)
    with pytest.raises(ValueError):
        CoincidenceConfig(accidental_offset_bins=1, peak_halfwidth_bins=2)
    with pytest.raises(ValueError):
        CoincidenceConfig(window_bins=60)


_times = st.lists(st.floats(0, 2e4, allow_nan=False), max_size=250).map(sorted)


@settings(max_examples=200, deadline=None)
@given(_times, _times, st.sampled_from([50.0, 192.0, 1000.0]))
def test_greedy_matches_brute_force(ta, tb, bin_ps):
    cfg = CoincidenceConfig(bin_ps=bin_ps, window_bins=5, peak_halfwidth_bins=1,
                            accidental_offset_bins=2, accidental_width_bins=2)
    coinc, _ = find_coincidences(ta, tb, cfg)
    got = list(zip(coinc.idx_a.tolist(), coinc.idx_b.tolist()))
    assert got == brute_force_greedy(ta, tb, cfg.window_ps)


def test_greedy_matches_brute_force_with_offset_center():
    rng = np.random.default_rng(1)
    ta = np.sort(rng.uniform(0, 1e6, 500))
    tb = np.sort(rng.uniform(0, 1e6, 500))
    cfg = CoincidenceConfig(center_ps=700.0)
    coinc, _ = find_coincidences(ta, tb, cfg)
    expected = brute_force_greedy((ta + 700.0).tolist(), tb.tolist(), cfg.window_ps)
    assert list(zip(coinc.idx_a.tolist(), coinc.idx_b.tolist())) == expected


def test_accidental_rate_formula():
    rng = np.random.default_rng(2)
    rate, duration = 1e4, 100.0
    ta = np.sort(rng.uniform(0, duration * 1e12, rng.poisson(rate * duration)))
    tb = np.sort(rng.uniform(0, duration * 1e12, rng.poisson(rate * duration)))
    cfg = CoincidenceConfig()
    coinc, _ = find_coincidences(ta, tb, cfg)
    expected = rate * rate * 2 * cfg.window_ps * 1e-12 * duration
    assert abs(len(coinc) - expected) <= 3 * math.sqrt(expected)


def test_accidental_rate_small_streams_cross_checked():
    rng = np.random.default_rng(3)
    ta = np.sort(rng.uniform(0, 1e8, 1000))
    tb = np.sort(rng.uniform(0, 1e8, 1000))
    cfg = CoincidenceConfig()
    coinc, _ = find_coincidences(ta, tb, cfg)
    assert len(coinc) == len(brute_force_greedy(ta.tolist(), tb.tolist(), cfg.window_ps))


def test_car_flat_histogram_is_one():
    assert car(_hist(np.full(161, 7))) == pytest.approx(1.0)


def test_car_peak_only_is_infinite():
    counts = np.zeros(161, dtype=np.int64)
    counts[80] = 50
    assert math.isinf(car(_hist(counts)))


def test_car_empty_histogram_raises():
    with pytest.raises(InsufficientDataError):
        car(_hist(np.zeros(161)))


def test_car_known_ratio():
    counts = np.full(161, 2, dtype=np.int64)
    counts[78:82] = 100  # bins -2..1
    assert car(_hist(counts)) == pytest.approx(400 / (2 * 4))


@given(st.floats(-5e4, 5e4))
def test_car_invariant_under_recentering(shift):
    rng = np.random.default_rng(4)
    delays = np.r_[rng.normal(0, 60, 2000), rng.uniform(-15000, 15000, 3000)]
    cfg = CoincidenceConfig()
    moved = CoincidenceConfig(center_ps=shift)
    assert car(histogram_delays(delays + shift, moved), moved) == pytest.approx(
        car(histogram_delays(delays, cfg), cfg))


def test_metadata_serializes_infinite_car():
    counts = np.zeros(161, dtype=np.int64)
    counts[80] = 3
    assert '"car": "inf"' in _hist(counts).metadata_json(CoincidenceConfig())


def test_delay_variance():
    assert delay_variance([3.0, 3.0, 3.0]) == 0.0
    assert delay_variance([0.0, 2.0]) == pytest.approx(2.0)
    with pytest.raises(InsufficientDataError):
        delay_variance([1.0])
