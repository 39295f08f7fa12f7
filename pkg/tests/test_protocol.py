import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import conditional_entropy as oracle_entropy
from simhelpers import pair_coincidences, two_user_stream
from symdoqkd.coincidence import CoincidenceConfig, InsufficientDataError, delay_variance
from symdoqkd.optics import ArmKind
from symdoqkd.protocol import (
    CONVENTIONS,
    FrameConfig,
    SecurityPolicy,
    SecurityResult,
    SessionConfig,
    assign_bases,
    bits_to_hex,
    conditional_entropy,
    encode_symbols,
    key_accounting,
    qber,
    run_pair_session,
    secure_bits_per_symbol,
    security_test,
    sift,
    symbols_to_bits,
)

PASS = SecurityResult(True, 3000.0)


@pytest.fixture(scope="module")
def lossless_pair():
    stream = two_user_stream(12.0, 4.0e4, seed=21)
    return stream, pair_coincidences(stream, CoincidenceConfig())


def test_assign_bases_default_rule():
    ab = assign_bases((0, 1))
    assert (ab.s_arm(0), ab.k_arm(0)) == (ArmKind.ND, ArmKind.AD)
    assert (ab.s_arm(1), ab.k_arm(1)) == (ArmKind.AD, ArmKind.ND)
    assert assign_bases((1, 0)) == ab


def test_assign_bases_alternate_convention():
    ab = assign_bases((2, 5), CONVENTIONS[1])
    assert ab.s_arm(2) == ArmKind.AD and ab.s_arm(5) == ArmKind.ND


def test_assign_bases_all_pairs_opposite():
    for a, b in itertools.combinations(range(8), 2):
        ab = assign_bases((a, b))
        assert ab.s_arm(a) != ab.s_arm(b)
        assert ab.k_arm(a) != ab.k_arm(b)


def test_assign_bases_rejects_self_and_unknown():
    with pytest.raises(ValueError):
        assign_bases((3, 3))
    with pytest.raises(ValueError):
        assign_bases((0, 1), "no-such-convention")


def test_sift_examples():
    ab = assign_bases((0, 1))
    empty = sift([], [], ab, 0, 1)
    assert all(len(part) == 0 for part in empty)
    # (K_A, S_B): user 0 on AD, user 1 on AD
    mixed = sift([ArmKind.AD], [ArmKind.AD], ab, 0, 1)
    assert list(mixed.discarded) == [0] and len(mixed.kk) == len(mixed.ss) == 0
    kk = sift([ArmKind.AD], [ArmKind.ND], ab, 0, 1)
    assert list(kk.kk) == [0]


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), max_size=200))
def test_sift_is_a_partition(arms):
    a = np.array([x for x, _ in arms], dtype=np.int64)
    b = np.array([y for _, y in arms], dtype=np.int64)
    res = sift(a, b, assign_bases((0, 1)), 0, 1)
    assert np.array_equal(np.sort(np.concatenate(res)), np.arange(len(arms)))


def test_encode_bits_per_symbol():
    frames = FrameConfig(bin_ps=100.0, bits_per_symbol=4)
    t = np.array([0.0, 150.0, 1550.0, 1650.0])
    sa, sb, kept = encode_symbols(t, t, frames)
    assert list(sa) == [0, 1, 15, 0] and np.array_equal(sa, sb) and kept.all()
    assert symbols_to_bits(sa, 4).size == 4 * len(sa)
    assert list(symbols_to_bits([5], 4)) == [0, 1, 0, 1]
    assert bits_to_hex([1, 0, 1, 0, 0, 1, 0, 1]) == "a5"


def test_encode_drops_frame_mismatch():
    frames = FrameConfig(bin_ps=100.0, bits_per_symbol=2)  # 400 ps frames
    sa, sb, kept = encode_symbols([390.0, 100.0], [410.0, 120.0], frames)
    assert list(kept) == [False, True] and list(sa) == [1] and list(sb) == [1]


def test_qber_examples():
    assert qber([1, 2, 3], [1, 2, 3]) == 0.0
    with pytest.raises(InsufficientDataError):
        qber([], [])
    rng = np.random.default_rng(0)
    n = 100_000
    e = qber(rng.integers(0, 16, n), rng.integers(0, 16, n))
    p = 15 / 16
    assert abs(e - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_conditional_entropy_matches_oracle():
    for e in (0.0, 0.01, 0.1, 0.5, 0.9):
        for d in (1, 2, 4):
            assert conditional_entropy(e, d) == pytest.approx(oracle_entropy(e, d))


def test_lossless_accounting():
    policy = SecurityPolicy(eve_information_bits=0.0, ec_efficiency=1.0)
    assert secure_bits_per_symbol(0.0, 4, policy) == 4.0
    report = key_accounting(100, 0.0, FrameConfig(), policy, PASS, 10.0)
    assert report.raw_bits == 400 and report.secure_bits == 400
    assert report.secure_rate_bps == 40.0


@pytest.mark.parametrize("d", [1, 2, 4, 6])
def test_rate_strictly_decreasing_in_error(d):
    policy = SecurityPolicy()
    grid = np.linspace(1e-4, 1 - 2.0 ** -d - 1e-4, 400)
    r = [secure_bits_per_symbol(e, d, policy, clamp=False) for e in grid]
    assert np.all(np.diff(r) < 0)


def test_accounting_rejects_bad_error_rate():
    for e in (-0.1, 1.1):
        with pytest.raises(ValueError):
            key_accounting(10, e, FrameConfig(), SecurityPolicy(), PASS, 1.0)


def test_failed_security_keeps_raw_report():
    failed = SecurityResult(False, 9e4, "S-base variance above threshold")
    report = key_accounting(50, 0.01, FrameConfig(), SecurityPolicy(), failed, 1.0)
    assert report.secure_bits == 0 and report.raw_bits == 200
    assert report.abort_reason


def test_security_test_threshold():
    delays = np.random.default_rng(1).normal(0, 60, 1000)
    assert security_test(delays, SecurityPolicy()).passed
    assert not security_test(delays * 4, SecurityPolicy()).passed
    assert security_test(delays * 1e4, SecurityPolicy(variance_threshold_ps2=math.inf)).passed
    with pytest.raises(InsufficientDataError):
        security_test([1.0], SecurityPolicy())


def test_policy_invariants():
    with pytest.raises(ValueError):
        SecurityPolicy(ec_efficiency=0.9)
    with pytest.raises(ValueError):
        SecurityPolicy(eve_information_bits=5.0).validate_for(4)


def test_session_rejects_self_pair(lossless_pair):
    stream, _ = lossless_pair
    with pytest.raises(ValueError):
        run_pair_session(1, 1, stream)


def test_session_is_order_independent(lossless_pair):
    stream, _ = lossless_pair
    r01, k01 = run_pair_session(0, 1, stream)
    r10, k10 = run_pair_session(1, 0, stream)
    assert r01 == r10 and np.array_equal(k01.secure_key_a, k10.secure_key_a)


def test_session_secure_keys_agree(lossless_pair):
    stream, _ = lossless_pair
    report, keys = run_pair_session(0, 1, stream)
    assert report.security_pass and report.secure_bits > 0
    assert report.raw_bits == 4 * report.kept_symbols
    assert report.qber_granularity == "symbol"
    assert len(keys.secure_key_a) == report.secure_bits
    assert np.array_equal(keys.secure_key_a, keys.secure_key_b)


def test_session_security_failure_emits_raw_report():
    stream = two_user_stream(2.0, 4.0e4, seed=22, extra_noise={1: 200.0})
    report, keys = run_pair_session(0, 1, stream)
    assert not report.security_pass
    assert report.secure_bits == 0 and len(keys.secure_key_a) == 0
    assert report.raw_bits > 0 and report.qber is not None


def test_session_with_no_events_aborts_cleanly():
    stream = two_user_stream(0.001, 10.0, seed=23)
    report, _ = run_pair_session(0, 1, stream, SessionConfig())
    assert report.secure_bits == 0 and not report.security_pass


def test_kk_and_ss_variances_agree(lossless_pair):
    _, (coinc, arms_a, arms_b, _, _) = lossless_pair
    res = sift(arms_a, arms_b, assign_bases((0, 1)), 0, 1)
    near = np.abs(coinc.delay_ps) < 1000.0
    kk = coinc.delay_ps[np.intersect1d(res.kk, np.flatnonzero(near))]
    ss = coinc.delay_ps[np.intersect1d(res.ss, np.flatnonzero(near))]
    v_kk, v_ss = delay_variance(kk), delay_variance(ss)
    # sample variance of a Gaussian has relative std sqrt(2/n)
    sigma = math.sqrt(2 / len(kk) + 2 / len(ss))
    assert len(kk) + len(ss) >= 10**5
    assert abs(v_kk / v_ss - 1) <= 3 * sigma


def test_mixed_basis_variance_is_broadened(lossless_pair):
    _, (coinc, arms_a, arms_b, _, _) = lossless_pair
    res = sift(arms_a, arms_b, assign_bases((0, 1)), 0, 1)
    near = np.abs(coinc.delay_ps) < 6000.0
    kk = coinc.delay_ps[np.intersect1d(res.kk, np.flatnonzero(near))]
    mixed = coinc.delay_ps[np.intersect1d(res.discarded, np.flatnonzero(near))]
    assert delay_variance(mixed) >= 5 * delay_variance(kk)
