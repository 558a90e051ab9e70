import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from torope.errors import ConfigError, InputError
from torope.rope import (
    EARLY_FUSION,
    INDEX_ONLY,
    SPLIT_BY_DIM,
    SPLIT_BY_HEAD,
    TIME_ONLY,
    EventSequence,
    FrequencyBank,
    TimeNormalization,
    allocate_heads,
    allocate_planes,
    build_base_bank,
    build_wavelength_bank,
    compute_angles,
    default_banks,
    effective_periods,
    interference_decompose,
    inverse_softplus,
    logit,
    make_angle_spec,
    normalize_timestamps,
    phase_sensitivities,
    relative_phase_kernel,
    rotate_pairs,
    round_half_up,
    sigmoid,
    softplus,
)


def banks(n=4):
    return default_banks(2 * n)


# ---------------------------------------------------------------- EventSequence


def test_event_sequence_basic():
    s = EventSequence([3, 1, 2], [10, 10, 20], user=7)
    assert s.length == 3
    assert s.item_ids.dtype == np.int64
    with pytest.raises(ValueError):
        s.item_ids[0] = 5


def test_event_sequence_rejects_bad_input():
    with pytest.raises(InputError):
        EventSequence([1, 2], [5])
    with pytest.raises(InputError):
        EventSequence([1, 2], [5, 4])
    with pytest.raises(InputError):
        EventSequence([-1], [5])
    with pytest.raises(InputError):
        EventSequence([1], [5.5])


def test_event_sequence_repair_is_stable():
    s = EventSequence.sorted_from([1, 2, 3, 4], [30, 10, 30, 10])
    assert s.item_ids.tolist() == [2, 4, 1, 3]
    assert s.raw_timestamps.tolist() == [10, 10, 30, 30]


def test_event_sequence_vocab_check():
    s = EventSequence([0, 4], [0, 1])
    s.check_vocab(5)
    with pytest.raises(InputError):
        s.check_vocab(4)


# ---------------------------------------------------------------- time normalization


def test_normalize_days():
    norm = TimeNormalization(u_ref=1000, s=86400)
    tau = normalize_timestamps(EventSequence([0, 0], [1000, 1000 + 86400 * 3]), norm)
    assert tau.tolist() == [0.0, 3.0]


def test_normalize_rejects_bad_divisor():
    with pytest.raises(ConfigError):
        TimeNormalization(0, 0.0)
    with pytest.raises(ConfigError):
        TimeNormalization(0, -1.0)


@given(
    st.lists(st.integers(0, 2_000_000_000), min_size=1, max_size=20),
    st.integers(-10**9, 10**9),
)
def test_normalize_anchor_shift_exact(ts, shift):
    ts = np.sort(np.array(ts, dtype=np.int64))
    base = normalize_timestamps(ts, TimeNormalization(int(ts[0]), 3600.0))
    moved = normalize_timestamps(ts + shift + 10**9, TimeNormalization(int(ts[0]) + shift + 10**9, 3600.0))
    assert np.array_equal(base, moved)


# ---------------------------------------------------------------- banks


def test_base_bank_values():
    b = build_base_bank(10000.0, 8)
    expect = [10000.0 ** (-2 * k / 8) for k in range(4)]
    assert np.allclose(b.omegas, expect, rtol=0, atol=1e-15)
    assert b.omegas[0] == 1.0
    assert b.omegas.tolist() == pytest.approx([1.0, 0.1, 0.01, 0.001], rel=1e-12)


def test_base_bank_rejects_odd_dimension():
    with pytest.raises(ConfigError):
        build_base_bank(10000.0, 7)


def test_wavelength_bank_endpoints_exact():
    b = build_wavelength_bank(1.0, 7.0, 5)
    assert b.omegas[0] == 2 * math.pi / 1.0
    assert b.omegas[-1] == 2 * math.pi / 7.0
    periods = effective_periods(b)
    # log-spaced: constant ratio between neighbours
    ratios = periods[1:] / periods[:-1]
    assert np.allclose(ratios, 7.0 ** 0.25, rtol=1e-12)


def test_wavelength_bank_degenerate_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        b = build_wavelength_bank(7.0, 7.0, 4)
    assert any("degenerate" in str(w.message) for w in caught)
    assert np.all(b.omegas == 2 * math.pi / 7.0)
    assert b.degenerate


def test_wavelength_bank_rejects_inverted_band():
    with pytest.raises(ConfigError):
        build_wavelength_bank(5.0, 1.0, 3)


def test_effective_periods_examples():
    assert effective_periods(FrequencyBank([math.pi])).tolist() == [2.0]
    assert effective_periods(FrequencyBank([2 * math.pi, 2 * math.pi / 7])) == pytest.approx([1.0, 7.0], rel=1e-15)


def test_bank_rejects_increasing():
    with pytest.raises(ConfigError):
        FrequencyBank([0.1, 0.2])
    with pytest.raises(ConfigError):
        FrequencyBank([])
    with pytest.raises(ConfigError):
        FrequencyBank([0.0])


@given(
    st.floats(1e-3, 10.0),
    st.floats(1.01, 1000.0),
    st.integers(2, 64),
)
def test_wavelength_bank_strictly_decreasing(lo, factor, n):
    b = build_wavelength_bank(lo, lo * factor, n)
    assert np.all(np.diff(b.omegas) < 0)


@given(st.integers(1, 64), st.floats(1.5, 1e6))
def test_base_bank_strictly_decreasing(n, base):
    b = build_base_bank(base, 2 * n)
    assert np.all(np.diff(b.omegas) < 0)


def test_resize_keeps_recipe():
    b = build_wavelength_bank(0.5, 64.0, 8)
    r = b.resized(3)
    assert r.omegas[0] == b.omegas[0] and r.omegas[-1] == b.omegas[-1]
    one = b.resized(1)
    assert effective_periods(one)[0] == pytest.approx(math.sqrt(0.5 * 64.0))
    base = build_base_bank(100.0, 8).resized(2)
    assert base.omegas.tolist() == pytest.approx([1.0, 0.1])


# ---------------------------------------------------------------- allocation


@pytest.mark.parametrize(
    "n,rho,n_time",
    [(8, 0.0, 0), (8, 1.0, 8), (4, 0.5, 2), (10, 0.3, 3), (8, 0.3, 2), (8, 0.9, 7), (4, 0.1, 0), (4, 0.9, 4), (2, 0.25, 1)],
)
def test_allocate_planes_counts(n, rho, n_time):
    a = allocate_planes(n, rho)
    assert len(a.time_planes) == n_time
    assert a.time_planes == frozenset(range(n_time))
    assert a.index_planes == frozenset(range(n_time, n))


def test_allocate_heads():
    assert allocate_heads(4, 0.0).time_heads == frozenset()
    assert len(allocate_heads(4, 0.5).time_heads) == 2
    assert len(allocate_heads(10, 0.3).time_heads) == 3
    assert allocate_heads(4, 1.0).index_heads == frozenset()


def test_allocation_rejects_bad_ratio():
    with pytest.raises(ConfigError):
        allocate_planes(4, 1.2)
    with pytest.raises(ConfigError):
        allocate_heads(4, -0.1)


def test_round_half_up_is_decimal():
    # 0.3 * 10 is 3.0000000000000004 in binary floating point
    assert round_half_up(0.3, 10) == 3
    assert round_half_up(0.25, 2) == 1
    assert round_half_up(0.125, 4) == 1
    assert round_half_up(0.35, 10) == 4


@given(st.integers(1, 64), st.floats(0.0, 1.0))
def test_allocation_partitions(n, rho):
    a = allocate_planes(n, rho)
    assert a.time_planes | a.index_planes == frozenset(range(n))
    assert not a.time_planes & a.index_planes


# ---------------------------------------------------------------- gates and scales


@given(st.floats(-15, 15))
def test_sigmoid_logit_roundtrip(x):
    p = sigmoid(x)
    assert 0.0 < p < 1.0
    assert logit(p) == pytest.approx(x, abs=1e-8)


@given(st.floats(1e-3, 50.0))
def test_softplus_roundtrip(y):
    assert softplus(inverse_softplus(y)) == pytest.approx(y, rel=1e-10)


# ---------------------------------------------------------------- angles


def test_fused_angle_hand_value():
    bank = FrequencyBank([0.1])
    spec = make_angle_spec(EARLY_FUSION, bank, bank, gate=0.5)
    theta = compute_angles([2], [4.0], spec)
    assert theta[0, 0] == pytest.approx(0.3, abs=1e-15)


def test_scales_multiply_frequencies():
    bank = FrequencyBank([0.1])
    spec = make_angle_spec(EARLY_FUSION, bank, bank, gate=0.25, index_scale=2.0, time_scale=3.0)
    theta = compute_angles([2], [4.0], spec)
    assert theta[0, 0] == pytest.approx(0.75 * 2 * 2 * 0.1 + 0.25 * 3 * 4 * 0.1, abs=1e-15)


def test_index_only_ignores_taus_time_only_ignores_indices():
    ib, tb = banks()
    idx = make_angle_spec(INDEX_ONLY, ib, tb)
    tim = make_angle_spec(TIME_ONLY, ib, tb)
    i = np.arange(6)
    a, b = np.random.default_rng(0).random((2, 6)) * 50
    assert np.array_equal(compute_angles(i, a, idx), compute_angles(i, b, idx))
    assert np.array_equal(compute_angles(i, a, tim), compute_angles(i + 9, a, tim))
    assert np.allclose(compute_angles(i, a, idx), i[:, None] * ib.omegas[None, :], atol=0)
    assert np.allclose(compute_angles(i, a, tim), a[:, None] * tb.omegas[None, :], atol=0)


def test_reduction_identities_angles():
    ib, tb = banks()
    rng = np.random.default_rng(1)
    i = np.arange(10)
    tau = np.sort(rng.random(10) * 30)
    ref_i = compute_angles(i, tau, make_angle_spec(INDEX_ONLY, ib, tb))
    ref_t = compute_angles(i, tau, make_angle_spec(TIME_ONLY, ib, tb))
    ef0 = compute_angles(i, tau, make_angle_spec(EARLY_FUSION, ib, tb, gate=0.0))
    ef1 = compute_angles(i, tau, make_angle_spec(EARLY_FUSION, ib, tb, gate=1.0))
    assert np.max(np.abs(ef0 - ref_i)) <= 1e-15
    assert np.max(np.abs(ef1 - ref_t)) <= 1e-15
    assert np.array_equal(compute_angles(i, tau, make_angle_spec(SPLIT_BY_DIM, ib, tb, rho=0.0)), ref_i)
    assert np.array_equal(compute_angles(i, tau, make_angle_spec(SPLIT_BY_DIM, ib, tb, rho=1.0)), ref_t)
    sh0 = make_angle_spec(SPLIT_BY_HEAD, ib, tb, rho=0.0, n_heads=4)
    sh1 = make_angle_spec(SPLIT_BY_HEAD, ib, tb, rho=1.0, n_heads=4)
    for h in range(4):
        assert np.array_equal(compute_angles(i, tau, sh0, head=h), ref_i)
        assert np.array_equal(compute_angles(i, tau, sh1, head=h), ref_t)


def test_split_dim_rebuilds_sub_ladders():
    ib, tb = default_banks(16, time_bank={"kind": "wavelength", "lambda_min": 0.5, "lambda_max": 64.0})
    spec = make_angle_spec(SPLIT_BY_DIM, ib, tb, rho=0.5)
    assert spec.gates.tolist() == [1, 1, 1, 1, 0, 0, 0, 0]
    t = spec.time_omegas[:4]
    p = spec.index_omegas[4:]
    assert t[0] == tb.omegas[0] and t[-1] == tb.omegas[-1]
    assert p.tolist() == pytest.approx(build_base_bank(10000.0, 8).omegas.tolist(), rel=1e-15)


def test_split_head_head_gates():
    ib, tb = banks()
    spec = make_angle_spec(SPLIT_BY_HEAD, ib, tb, rho=0.5, n_heads=4)
    assert spec.gate_matrix(4).tolist() == [[1.0] * 4, [1.0] * 4, [0.0] * 4, [0.0] * 4]
    with pytest.raises(InputError):
        spec.head_gates(4)


def test_compute_angles_length_mismatch():
    ib, tb = banks()
    with pytest.raises(InputError):
        compute_angles([0, 1], [0.0], make_angle_spec(INDEX_ONLY, ib, tb))


def test_spec_invariants_enforced():
    ib, tb = banks()
    spec = make_angle_spec(INDEX_ONLY, ib, tb)
    with pytest.raises(ConfigError):
        spec.with_values(gates=np.full(4, 0.5))
    with pytest.raises(ConfigError):
        make_angle_spec(EARLY_FUSION, ib, tb, gate=1.5)
    with pytest.raises(ConfigError):
        make_angle_spec(EARLY_FUSION, ib, tb, index_scale=0.0)
    with pytest.raises(ConfigError):
        make_angle_spec("bogus", ib, tb)


@given(st.integers(0, 1000), st.integers(1, 12))
def test_index_shift_leaves_angle_differences(c, n):
    ib, tb = banks()
    spec = make_angle_spec(INDEX_ONLY, ib, tb)
    i = np.arange(n)
    tau = np.zeros(n)
    a = compute_angles(i, tau, spec)
    b = compute_angles(i + c, tau, spec)
    da = a[:, None, :] - a[None, :, :]
    db = b[:, None, :] - b[None, :, :]
    assert np.max(np.abs(np.cos(da) - np.cos(db))) < 1e-9


# ---------------------------------------------------------------- rotation


def test_rotation_examples():
    assert np.array_equal(rotate_pairs(np.array([[1.5, -2.0]]), np.array([[0.0]])), [[1.5, -2.0]])
    q = rotate_pairs(np.array([[1.0, 0.0]]), np.array([[math.pi / 2]]))
    assert q == pytest.approx(np.array([[0.0, 1.0]]), abs=1e-15)
    h = rotate_pairs(np.array([[0.3, -0.7]]), np.array([[math.pi]]))
    assert h == pytest.approx(np.array([[-0.3, 0.7]]), abs=1e-15)


def test_rotation_rejects_odd_width():
    with pytest.raises(ConfigError):
        rotate_pairs(np.ones((2, 3)), np.zeros((2, 1)))


@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_rotation_isometry(T, N, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(T, 2 * N)) * 10
    a = rng.uniform(-100, 100, size=(T, N))
    r = rotate_pairs(v, a)
    before = np.hypot(v[:, 0::2], v[:, 1::2])
    after = np.hypot(r[:, 0::2], r[:, 1::2])
    assert np.max(np.abs(before - after)) <= 1e-12 * max(1.0, before.max())


def test_rotated_dot_product_depends_on_angle_difference():
    rng = np.random.default_rng(3)
    q, k = rng.normal(size=(2, 1, 8))
    a = rng.uniform(-5, 5, size=(1, 4))
    b = rng.uniform(-5, 5, size=(1, 4))
    c = rng.uniform(-5, 5, size=(1, 4))
    s1 = rotate_pairs(q, a) @ rotate_pairs(k, b).T
    s2 = rotate_pairs(q, a + c) @ rotate_pairs(k, b + c).T
    assert s1 == pytest.approx(s2, abs=1e-12)


# ---------------------------------------------------------------- diagnostics


def test_relative_phase_kernel_examples():
    ib, tb = banks()
    spec = make_angle_spec(EARLY_FUSION, ib, tb, gate=0.3)
    assert np.allclose(relative_phase_kernel(0, 0.0, spec), 1.0, atol=0)
    bank = FrequencyBank([math.pi / 4])
    idx = make_angle_spec(INDEX_ONLY, bank, bank)
    assert relative_phase_kernel(2, 123.0, idx)[0] == pytest.approx(0.0, abs=1e-15)
    tim = make_angle_spec(TIME_ONLY, ib, tb)
    k = 3
    period = 2 * math.pi / tb.omegas[k]
    assert relative_phase_kernel(5, period, tim)[k] == pytest.approx(1.0, abs=1e-12)


def test_relative_phase_kernel_matches_unit_vector_score():
    ib, tb = banks()
    spec = make_angle_spec(EARLY_FUSION, ib, tb, gate=0.4)
    di, dt = 3, 1.7
    q = np.tile([1.0, 0.0], 4)[None]
    qa = compute_angles([di], [dt], spec)
    ka = compute_angles([0], [0.0], spec)
    rq, rk = rotate_pairs(q, qa), rotate_pairs(q, ka)
    per_plane = rq[0, 0::2] * rk[0, 0::2] + rq[0, 1::2] * rk[0, 1::2]
    assert per_plane == pytest.approx(relative_phase_kernel(di, dt, spec), abs=1e-12)


def test_interference_examples():
    assert interference_decompose(0.0, 0.0) == pytest.approx((1.0, 0.0, 1.0))
    c, i, t = interference_decompose(math.pi / 4, math.pi / 4)
    assert (c, i, t) == pytest.approx((0.5, 0.5, 0.0), abs=1e-15)
    c, i, t = interference_decompose(math.pi / 2, 0.0)
    assert (c, i, t) == pytest.approx((0.0, 0.0, 0.0), abs=1e-15)


def test_phase_sensitivity_examples():
    assert phase_sensitivities(0.0, 1.0, 2.0) == (0.0, 0.0)
    assert phase_sensitivities(math.pi / 2, 1.0, 2.0) == pytest.approx((-1.0, -2.0))
    assert phase_sensitivities(math.pi, 1.0, 2.0) == pytest.approx((0.0, 0.0), abs=1e-15)


def test_high_frequency_locality():
    ib, tb = banks(8)
    spec = make_angle_spec(EARLY_FUSION, ib, tb, gate=0.5)
    wp, wt = ib.omegas[0], tb.omegas[0]
    rng = np.random.default_rng(5)
    for _ in range(200):
        di = rng.uniform(-0.1, 0.1) / wp
        dt = rng.uniform(-0.1, 0.1) / wt
        a, b = di * wp, dt * wt
        assert math.cos(a * 0.5 + b * 0.5) >= 0.99
        assert interference_decompose(a, b)[2] >= 0.98
    assert relative_phase_kernel(0, 0.1 / tb.omegas[0], spec)[0] >= 0.99
