import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hstgcn.evaluate import (
    EvalReport,
    RunPredictions,
    SliceSpec,
    build_report,
    classify_slices,
    compute_metrics,
    ha_baseline,
)
from hstgcn.features import TimeGrid, historical_average_table
from hstgcn.network import RoadNetwork

GRID = TimeGrid(weeks_train=2, weeks_test=1)
SPD = GRID.slots_per_day


def one_segment(cls="expressway", speed=70.0):
    return RoadNetwork([500.0], [cls], [speed], [0], [1], [[0, 0], [1, 0]])


def free_flow(kmh=70.0, n=1):
    return np.full((n, GRID.n_slots), 3.6 / kmh)


BUSY = np.full((1, GRID.n_slots), 100.0)     # 20 veh/min with 5-minute slots


# --- metrics ---------------------------------------------------------------------

def test_metrics_examples():
    assert compute_metrics([1.0, 2.0], [1.0, 2.0]) == (0.0, 0.0, 0.0)
    mae, mape, rmse = compute_metrics([2.0, 4.0], [1.0, 4.0], mape_max_kmh=np.inf)
    assert mae == 0.5 and mape == 50.0
    assert rmse == pytest.approx(math.sqrt(0.5), abs=1e-15)


def test_metrics_mask_and_errors():
    pred, truth = np.array([0.1, 0.5, 0.2]), np.array([0.1, 0.1, 0.1])
    assert compute_metrics(pred, truth, [True, False, True])[0] == pytest.approx(0.05)
    with pytest.raises(ValueError, match="no samples"):
        compute_metrics(pred, truth, np.zeros(3, dtype=bool))
    with pytest.raises(ValueError, match="shape"):
        compute_metrics(pred, truth[:2])


def test_mape_exclusions():
    # 3.6 / 0.02 = 180 km/h is above the cap; 1e-5 s/m is below the floor
    _, mape, _ = compute_metrics([0.04, 0.1, 0.2], [0.02, 1e-5, 0.1])
    assert mape == pytest.approx(100.0)
    assert math.isnan(compute_metrics([0.1], [0.02])[1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 50))
def test_metrics_properties(seed, m):
    rng = np.random.default_rng(seed)
    pred, truth = rng.uniform(0.03, 0.3, m), rng.uniform(0.03, 0.3, m)
    mae, mape, rmse = compute_metrics(pred, truth)
    assert mae <= rmse + 1e-15
    perm = rng.permutation(m)
    np.testing.assert_allclose(compute_metrics(pred[perm], truth[perm]), (mae, mape, rmse), rtol=1e-12)


# --- slicing -----------------------------------------------------------------------

def test_free_flow_has_no_congestion():
    tau = free_flow()
    lab = classify_slices(tau, tau, BUSY, one_segment(), grid=GRID)
    assert lab.high_volume[0] and not lab.C.any() and not lab.NRC.any()


def test_expressway_dip_is_extended_within_day():
    tau = free_flow()
    day = 9
    dip = day * SPD + np.arange(50, 53)
    tau[0, dip] = 3.6 / 15.0
    lab = classify_slices(tau, free_flow(), BUSY, one_segment(), grid=GRID)
    expected = np.zeros(GRID.n_slots, dtype=bool)
    expected[day * SPD + 38:day * SPD + 65] = True
    np.testing.assert_array_equal(lab.C[0], expected)
    assert lab.congested[0].sum() == 3


def test_extension_is_clipped_to_the_day():
    tau = free_flow()
    tau[0, 9 * SPD + 1] = 3.6 / 15.0
    lab = classify_slices(tau, free_flow(), BUSY, one_segment(), grid=GRID)
    assert lab.C[0, 9 * SPD - 1] == False  # noqa: E712
    assert np.flatnonzero(lab.C[0]).tolist() == list(range(9 * SPD, 9 * SPD + 14))


def test_exactly_half_of_ha_is_not_nrc():
    ha = free_flow(60.0)
    tau = free_flow(60.0)
    tau[0, 9 * SPD + 40:9 * SPD + 45] = 3.6 / 30.0
    lab = classify_slices(tau, ha, BUSY, one_segment(), grid=GRID)
    assert not lab.nrc.any()
    tau[0, 9 * SPD + 40:9 * SPD + 45] = 3.6 / 29.9
    lab = classify_slices(tau, ha, BUSY, one_segment(), grid=GRID)
    assert lab.nrc[0].sum() == 5


def test_single_slot_nrc_dip_is_ignored():
    tau = free_flow(60.0)
    tau[0, 9 * SPD + 40] = 3.6 / 10.0
    lab = classify_slices(tau, free_flow(60.0), BUSY, one_segment(), grid=GRID)
    assert not lab.nrc.any() and lab.congested.sum() == 1


def test_low_volume_segment_is_excluded():
    tau = free_flow()
    tau[0, 9 * SPD + 50:9 * SPD + 53] = 3.6 / 15.0
    quiet = np.full_like(BUSY, 40.0)         # 8 veh/min
    lab = classify_slices(tau, free_flow(), quiet, one_segment(), grid=GRID)
    assert not lab.high_volume[0] and not lab.C.any() and lab.congested.sum() == 3


def test_slicing_errors():
    tau = free_flow()
    with pytest.raises(ValueError, match="road class"):
        classify_slices(tau, tau, BUSY, one_segment(), SliceSpec(congestion_kmh={"freeway": 30.0}), GRID)
    with pytest.raises(ValueError, match="whole number of days"):
        classify_slices(tau[:, :-1], tau[:, :-1], BUSY, one_segment(), grid=GRID)
    with pytest.raises(ValueError):
        SliceSpec(extension=-1)
    with pytest.raises(ValueError):
        SliceSpec(congestion_kmh={"major": 0.0})


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_nrc_implies_congestion_where_half_ha_is_below_threshold(seed):
    rng = np.random.default_rng(seed)
    speeds = rng.choice([8.0, 15.0, 25.0, 45.0, 70.0], size=(2, GRID.n_slots), p=[.1, .1, .1, .2, .5])
    tau = 3.6 / speeds
    ha = historical_average_table(tau, GRID)
    net = RoadNetwork([500.0, 500.0], ["expressway", "major"], [70.0, 50.0], [0, 1], [1, 2], np.zeros((3, 2)))
    lab = classify_slices(tau, ha, np.full((2, GRID.n_slots), 60.0), net, grid=GRID)
    thresh = np.array([[20.0], [12.0]])
    strict = 0.5 * (3.6 / ha) <= thresh
    assert not np.any(lab.nrc & strict & ~lab.congested)
    again = classify_slices(tau, ha, np.full((2, GRID.n_slots), 60.0), net, grid=GRID)
    for a, b in zip((lab.C, lab.NRC, lab.nrc), (again.C, again.NRC, again.nrc)):
        np.testing.assert_array_equal(a, b)


# --- HA baseline -----------------------------------------------------------------

def test_ha_baseline_examples():
    g = TimeGrid(weeks_train=2, weeks_test=1)
    L = g.slots_per_week
    tau = np.full((1, g.n_slots), 0.1)
    tau[0, 20], tau[0, 20 + L] = 3.0, 5.0
    ha = historical_average_table(tau, g)
    anchor = 2 * L + 19
    assert ha_baseline(ha, [anchor], F=12)[0, 0, 0] == 4.0
    periodic = np.tile(np.random.default_rng(0).uniform(0.03, 0.1, size=(2, L)), 3)
    ha_p = historical_average_table(periodic, g)
    anchors = np.arange(2 * L + 5, 2 * L + 100)
    pred = ha_baseline(ha_p, anchors, 12)
    truth = periodic[:, anchors[:, None] + np.arange(1, 13)].transpose(1, 0, 2)
    np.testing.assert_allclose(pred, truth, atol=1e-15)


# --- reports ---------------------------------------------------------------------

def _report_inputs(seed=0):
    rng = np.random.default_rng(seed)
    tau = 3.6 / rng.choice([10.0, 40.0, 70.0], size=(1, GRID.n_slots), p=[.2, .3, .5])
    ha = historical_average_table(tau, GRID)
    lab = classify_slices(tau, ha, BUSY, one_segment(), grid=GRID)
    anchors = np.arange(GRID.s_train + 5, GRID.s_train + 150)
    truth = tau[:, anchors[:, None] + np.arange(1, 13)].transpose(1, 0, 2)
    runs = [RunPredictions("HA", anchors, ha_baseline(ha, anchors)),
            RunPredictions("model", anchors, truth + rng.normal(0, 0.01, truth.shape))]
    return tau, lab, runs


def test_report_cells_and_roundtrip():
    tau, lab, runs = _report_inputs()
    rep = build_report(runs, tau, lab)
    assert rep.slices() == ["full", "C", "NRC"]
    assert rep.variants() == ["HA", "model"]
    for s in rep.slices():
        for v in rep.variants():
            for h in ["all"] + list(range(1, 13)):
                assert rep.value(s, v, "MAE", h) <= rep.value(s, v, "RMSE", h) + 1e-15
    assert all(r[5] > 0 for r in rep.rows)
    assert rep.table("full")["HA"][3] == 145 * 12
    again = EvalReport.from_csv(rep.to_csv())
    assert again.to_csv() == rep.to_csv()
    assert build_report(runs, tau, lab).to_csv() == rep.to_csv()
    assert build_report(runs, tau, lab).to_svg() == rep.to_svg()
    assert rep.to_svg().startswith("<svg")


def test_single_run_full_slice_table():
    tau, lab, runs = _report_inputs(1)
    rep = build_report(runs[:1], tau, lab, slices=("full",))
    assert list(rep.table("full")) == ["HA"]


def test_report_rejects_mismatched_runs():
    tau, lab, runs = _report_inputs(2)
    bad = RunPredictions("x", runs[0].anchors + 1, runs[0].pred)
    with pytest.raises(ValueError, match="different anchors"):
        build_report([runs[0], bad], tau, lab)
    with pytest.raises(ValueError):
        build_report([], tau, lab)
