from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hstgcn.features import (
    NavigationLog,
    TimeGrid,
    aggregate_routes,
    build_feature_store,
    build_feature_window,
    historical_average,
    historical_average_table,
    impute_travel_time,
    inject_noise,
    valid_anchors,
    window_sampler,
)

# two hourly slots per day keeps weekly arithmetic readable
TINY = dict(slot_minutes=60, day_start_hour=6, day_end_hour=8)


def brute_force_cube(records, n, n_slots, F):
    """Materialise every (route, hop, lead) triple and count with a hash map."""
    counts = Counter()
    for _, psi, hops in records:
        for s, d in hops:
            if not 0 <= d < n_slots:
                continue
            for f in range(F + 1):
                if d - f < psi or d - f < 0:
                    break
                counts[(s, d - f, f)] += 1
    nu = np.zeros((n, n_slots, F + 1), dtype=np.int64)
    for (s, t, f), c in counts.items():
        nu[s, t, f] = c
    return nu


def random_records(rng, n_routes, n, n_slots, max_hops=6):
    recs = []
    for r in range(n_routes):
        psi = int(rng.integers(0, n_slots))
        m = int(rng.integers(0, max_hops + 1))
        slots = np.sort(psi + rng.integers(0, 8, size=m))
        recs.append((r, psi, [(int(rng.integers(0, n)), int(d)) for d in slots]))
    return recs


# --- time grid ---------------------------------------------------------------

def test_default_grid_arithmetic():
    g = TimeGrid()
    assert g.slots_per_day == 192
    assert g.slots_per_week == 1344
    assert g.s_train == 10752 and g.s_test == 2688
    assert g.n_days == 70


# --- historical average --------------------------------------------------------

def test_ha_constant_series():
    g = TimeGrid(weeks_train=3, weeks_test=1, **TINY)
    x = np.full(g.n_slots, 2.5)
    np.testing.assert_allclose(historical_average_table(x, g), 2.5)


def test_ha_two_weeks_test_slot():
    g = TimeGrid(weeks_train=2, weeks_test=1, **TINY)
    L = g.slots_per_week
    x = np.zeros(g.n_slots)
    x[3], x[3 + L] = 3.0, 5.0
    t = 3 + 2 * L
    assert historical_average(x, g, t) == 4.0
    assert historical_average_table(x, g)[t] == 4.0


def test_ha_excludes_own_slot_in_training():
    g = TimeGrid(weeks_train=3, weeks_test=1, **TINY)
    L = g.slots_per_week
    x = np.zeros(g.n_slots)
    x[[1, 1 + L, 1 + 2 * L]] = [2.0, 4.0, 6.0]
    assert historical_average(x, g, 1 + L) == 4.0
    assert historical_average_table(x, g)[1 + L] == 4.0
    # literal divisor: (2 + 6) / 3
    assert historical_average(x, g, 1 + L, literal=True) == pytest.approx(8 / 3)
    assert historical_average_table(x, g, literal=True)[1 + L] == pytest.approx(8 / 3)


def test_ha_without_qualifying_slots():
    g = TimeGrid(weeks_train=1, weeks_test=1, **TINY)
    with pytest.raises(ValueError):
        historical_average(np.ones(g.n_slots), g, 0)
    with pytest.raises(ValueError):
        historical_average_table(np.ones(g.n_slots), g)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_ha_table_matches_pointwise_definition(seed, weeks):
    g = TimeGrid(weeks_train=weeks, weeks_test=1, **TINY)
    x = np.random.default_rng(seed).normal(size=(2, g.n_slots))
    table = historical_average_table(x, g)
    for t in range(g.n_slots):
        np.testing.assert_allclose(table[:, t], historical_average(x, g, t), rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_ha_is_idempotent_on_weekly_periodic_series(seed, weeks):
    g = TimeGrid(weeks_train=weeks, weeks_test=1, **TINY)
    week = np.random.default_rng(seed).normal(size=g.slots_per_week)
    x = np.tile(week, weeks + 1)
    once = historical_average_table(x, g)
    np.testing.assert_allclose(once, x, atol=1e-12)
    np.testing.assert_allclose(historical_average_table(once, g), once, atol=1e-12)


# --- route aggregation ----------------------------------------------------------

def test_empty_log_gives_zero_cube():
    cube = aggregate_routes(NavigationLog.empty(), 20, 3, 12)
    assert cube.nu.shape == (3, 20, 13) and not cube.nu.any()


def test_single_hop_trace():
    log = NavigationLog.from_records([(0, 10, [(1, 12)])])
    nu = aggregate_routes(log, 30, 2, 12).nu
    assert nu[1, 12, 0] == 1 and nu[1, 11, 1] == 1 and nu[1, 10, 2] == 1
    assert nu.sum() == 3


def test_identical_routes_double_counts():
    rec = (0, 4, [(0, 5), (1, 7), (2, 9)])
    one = aggregate_routes(NavigationLog.from_records([rec]), 20, 3, 12).nu
    two = aggregate_routes(NavigationLog.from_records([rec, (1,) + rec[1:]]), 20, 3, 12).nu
    np.testing.assert_array_equal(two, 2 * one)


def test_out_of_grid_hops_are_skipped_and_counted():
    log = NavigationLog.from_records([(0, 17, [(0, 18), (1, 20), (1, 25)])])
    cube = aggregate_routes(log, 20, 2, 3)
    assert cube.skipped_hops == 2
    assert cube.nu[0, 18, 0] == 1 and cube.nu[1].sum() == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(0, 100), st.integers(1, 12))
def test_aggregation_matches_brute_force(seed, n_routes, F):
    rng = np.random.default_rng(seed)
    n, n_slots = 4, 40
    recs = random_records(rng, n_routes, n, n_slots)
    log = NavigationLog.from_records(recs)
    cube = aggregate_routes(log, n_slots, n, F, chunk=7)
    np.testing.assert_array_equal(cube.nu, brute_force_cube(recs, n, n_slots, F))
    in_grid = sum(1 for _, psi, hops in recs for _, d in hops if psi <= d < n_slots)
    assert cube.nu[..., 0].sum() == in_grid
    assert np.all(cube.nu >= 0)


def test_aggregation_merge_is_order_independent():
    rng = np.random.default_rng(7)
    recs = random_records(rng, 80, 5, 50)
    a = aggregate_routes(NavigationLog.from_records(recs), 50, 5, 12).nu
    half = NavigationLog.from_records(recs[:40]).concat(NavigationLog.from_records(recs[40:]))
    b = aggregate_routes(NavigationLog.from_records(recs[::-1]), 50, 5, 12).nu
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, aggregate_routes(half, 50, 5, 12).nu)


def test_log_validation():
    with pytest.raises(ValueError, match="unknown segment"):
        NavigationLog.from_records([(0, 0, [(5, 1)])]).validate(3)
    with pytest.raises(ValueError, match="decrease"):
        NavigationLog.from_records([(0, 0, [(0, 3), (1, 2)])]).validate(3)
    with pytest.raises(ValueError, match="precedes launch"):
        NavigationLog.from_records([(0, 4, [(0, 3)])]).validate(3)
    NavigationLog.from_records([(0, 0, [(0, 3)]), (1, 1, [(1, 1), (2, 1)])]).validate(3)


# --- windows --------------------------------------------------------------------

def _store_inputs(rng, n=3, S=60, F=12):
    nu = rng.integers(0, 5, size=(n, S, F + 1))
    tau = rng.uniform(0.03, 0.2, size=(n, S))
    return nu, tau, rng.uniform(0, 4, size=(n, S)), rng.uniform(0.03, 0.2, size=(n, S))


def test_window_layout():
    rng = np.random.default_rng(0)
    nu, tau, ha_v, ha_t = _store_inputs(rng)
    t0 = 20
    w = build_feature_window(nu, tau, ha_v, ha_t, t0, P=6, F=12)
    assert w.V.shape == (3, 6, 26) and w.T.shape == (3, 6, 14) and w.label.shape == (3, 12)
    for p, t in enumerate(range(t0 - 5, t0 + 1)):
        np.testing.assert_array_equal(w.V[:, p, :13], nu[:, t, :])
        np.testing.assert_array_equal(w.V[:, p, 13:], ha_v[:, t:t + 13])
        np.testing.assert_array_equal(w.T[:, p, 0], tau[:, t])
        np.testing.assert_array_equal(w.T[:, p, 1:], ha_t[:, t:t + 13])
    np.testing.assert_array_equal(w.label, tau[:, t0 + 1:t0 + 13])


def test_batched_window_matches_single():
    rng = np.random.default_rng(1)
    args = _store_inputs(rng)
    b = build_feature_window(*args, np.array([5, 9, 30]))
    for i, t0 in enumerate([5, 9, 30]):
        s = build_feature_window(*args, t0)
        np.testing.assert_array_equal(b.V[i], s.V)
        np.testing.assert_array_equal(b.T[i], s.T)
        np.testing.assert_array_equal(b.label[i], s.label)


def test_window_out_of_range():
    args = _store_inputs(np.random.default_rng(2))
    with pytest.raises(ValueError, match="leaves the grid"):
        build_feature_window(*args, 4)
    with pytest.raises(ValueError, match="leaves the grid"):
        build_feature_window(*args, 48)
    build_feature_window(*args, 47)


# --- noise ------------------------------------------------------------------------

def test_noise_leaves_large_entries_and_stays_nonnegative():
    rng = np.random.default_rng(3)
    V = rng.integers(0, 8, size=(50, 6, 26)).astype(float)
    out = inject_noise(V, 3.0, 0.3, rng=1)
    big = V >= 3
    np.testing.assert_array_equal(out[big], V[big])
    assert np.all(out >= 0)
    assert not np.array_equal(out[~big], V[~big])
    assert np.array_equal(out, inject_noise(V, 3.0, 0.3, rng=1))
    assert inject_noise(np.array([5.0]), 3.0, 0.3, rng=2)[0] == 5.0


def test_noise_on_zero_entries_has_clamped_half_normal_mean():
    out = inject_noise(np.zeros(10_000), 3.0, 0.3, rng=0)
    # oracle: E[max(N(0, s), 0)] = s / sqrt(2 pi) = s sqrt(2/pi) / 2 ~ 0.1197
    assert 0.10 <= out.mean() <= 0.14


def test_noise_rejects_nonpositive_std():
    with pytest.raises(ValueError):
        inject_noise(np.zeros(3), std=0.0)


# --- anchors ----------------------------------------------------------------------

def test_anchor_count_per_day():
    g = TimeGrid(weeks_train=1, weeks_test=1)
    a = valid_anchors(g, 6, 12, 0, g.slots_per_day)
    assert len(a) == 192 - 6 - 12 + 1 == 175
    assert len(window_sampler(g, mode="train")) == 175 * 7


def test_anchors_never_straddle_days():
    g = TimeGrid(weeks_train=1, weeks_test=1)
    a = window_sampler(g, 6, 12, "test")
    assert np.array_equal(g.day_of(a - 5), g.day_of(a + 12))
    assert a.min() - 5 >= g.s_train


def test_sampler_determinism_and_permutation():
    g = TimeGrid(weeks_train=1, weeks_test=1)
    assert np.array_equal(window_sampler(g, mode="test"), window_sampler(g, mode="test"))
    a, b = window_sampler(g, mode="train", seed=0), window_sampler(g, mode="train", seed=1)
    assert not np.array_equal(a, b)
    assert np.array_equal(np.sort(a), np.sort(b))
    with pytest.raises(ValueError):
        window_sampler(g, mode="eval")


# --- imputation and store ------------------------------------------------------------

def test_impute_carries_forward_then_free_flow():
    tau = np.array([[np.nan, 0.1, np.nan, np.nan, 0.2], [np.nan, np.nan, np.nan, np.nan, np.nan]])
    out = impute_travel_time(tau, [0.05, 0.07])
    np.testing.assert_array_equal(out, [[0.05, 0.1, 0.1, 0.1, 0.2], [0.07] * 5])


def test_feature_store_channels_and_checks():
    g = TimeGrid(weeks_train=2, weeks_test=1, **TINY)
    rng = np.random.default_rng(4)
    tau = rng.uniform(0.04, 0.1, size=(3, g.n_slots))
    log = NavigationLog.from_records(random_records(rng, 30, 3, g.n_slots))
    store = build_feature_store(tau, log, g, P=1, F=1)
    assert store.v_channels == 4 and store.t_channels == 3 and store.n == 3
    np.testing.assert_allclose(store.ha_time, historical_average_table(tau, g))
    with pytest.raises(ValueError, match="slots"):
        build_feature_store(tau[:, :-1], log, g)
    bad = tau.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="gaps"):
        build_feature_store(bad, log, g)
