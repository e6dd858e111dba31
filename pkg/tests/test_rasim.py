import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cranlink.channel import ChannelParams, GainModel, GeometryConfig, drop_entities
from cranlink.errors import ConfigError, MalformedReportError
from cranlink.rasim import (
    COLLISION,
    SILENCE,
    DeviceSource,
    RAConfig,
    RAReport,
    merge_reports,
    model_lambda_out,
    p_star,
    poisson_arrivals,
    run_campaign,
    simulate_slot,
    slot_outcomes,
)
from cranlink.rng import substream


def _report(T, V, rows):
    return RAReport.from_records(rows, T, V)


# --- closed forms --------------------------------------------------------

def test_p_star_values():
    assert p_star(0.99, 500, 0.2) == pytest.approx(1 - 0.01 ** 0.01, abs=1e-12)
    assert p_star(0.99, 500, 0.2) == pytest.approx(0.045007, abs=1e-5)
    assert p_star(0.7, 1, 1.0) == pytest.approx(0.7)
    assert p_star(1e-12, 500, 0.2) < 1e-13


@pytest.mark.parametrize("rho,theta", [(0.0, 0.2), (1.0, 0.2), (0.99, 0.001)])
def test_p_star_domain(rho, theta):
    with pytest.raises(ConfigError):
        p_star(rho, 500, theta)


def test_model_lambda_out_values():
    assert model_lambda_out(0.0, 100, 506) == 0.0
    assert model_lambda_out(1.0, 100, 506) == 506
    assert model_lambda_out(0.04501, 100, 506) == pytest.approx(500.9, abs=0.1)


@given(st.floats(0.001, 0.5), st.integers(1, 300))
def test_model_monotone_in_slots(q, T):
    assert model_lambda_out(q, T + 1, 506) >= model_lambda_out(q, T, 506)


# --- arrivals ------------------------------------------------------------

def test_poisson_arrival_mean():
    rng = np.random.default_rng(0)
    counts = rng.poisson(500, size=100_000)  # same draw path as poisson_arrivals
    assert abs(counts.mean() - 500) < 5
    n = [len(poisson_arrivals(500, substream(1, "arrivals", f))) for f in range(2000)]
    assert abs(np.mean(n) - 500) < 0.01 * 500


def test_arrival_ids_are_fresh():
    rng = np.random.default_rng(3)
    a = poisson_arrivals(20, rng, 0)
    b = poisson_arrivals(20, rng, int(a[-1]) + 1)
    assert not set(a.tolist()) & set(b.tolist())


def test_poisson_arrivals_rejects_bad_rate():
    with pytest.raises(ConfigError):
        poisson_arrivals(0.0, np.random.default_rng(0))


# --- slot outcomes -------------------------------------------------------

def test_slot_rules():
    G = np.array([[-10.0, -12.0, -30.0, -40.0, -25.0, -50.0, -19.0]])
    assert simulate_slot([], G, -18.0, 0) == ("silence",)
    assert simulate_slot([0, 2, 3], G, -18.0, 0) == ("detection", 0, -10.0)
    assert simulate_slot([0, 1, 2, 3, 4, 5, 6], G, -18.0, 0) == ("collision",)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_vectorized_slots_match_scalar_rule(seed):
    rng = np.random.default_rng(seed)
    T, V, n = 6, 5, 7
    G = rng.uniform(-30, -5, (V, n))
    chi = rng.random((T, n)) < 0.3
    ids = np.arange(100, 100 + n)
    rep = slot_outcomes(chi, G >= -18.0, ids, G)
    for t in range(T):
        for v in range(V):
            res = simulate_slot(np.flatnonzero(chi[t]), G, -18.0, v)
            if res[0] == "silence":
                assert rep.outcome[t, v] == SILENCE
            elif res[0] == "collision":
                assert rep.outcome[t, v] == COLLISION
            else:
                assert rep.outcome[t, v] == ids[res[1]]
                assert rep.gain_db[t, v] == G[v, res[1]]


# --- central-unit merge --------------------------------------------------

def test_merge_two_by_two_fixture():
    rep = _report(2, 2, [(0, 0, "detection", 7, -10.0), (0, 1, "silence", None, None)])
    view = merge_reports(rep)
    assert view.detected.tolist() == [7]
    assert view.detectors(0) == {0}
    assert view.silence_sectors(0) == {1}
    assert view.known_gains[0, 0] == -10.0


def test_merge_all_silence():
    view = merge_reports(_report(3, 4, []))
    assert view.n_detected == 0
    assert all(view.silence_sectors(t) == {0, 1, 2, 3} for t in range(3))


def test_merge_other_detectors():
    rep = _report(1, 3, [(0, 0, "detection", 5, -11.0), (0, 1, "detection", 9, -12.0), (0, 2, "collision", None, None)])
    view = merge_reports(rep)
    j5, j9 = view.column_of(5), view.column_of(9)
    assert view.other_detectors(0, j5) == {1}
    assert view.other_detectors(0, j9) == {0}


def test_merge_orders_by_slot_then_sector():
    rep = _report(2, 3, [(1, 0, "detection", 1, -10.0), (0, 2, "detection", 2, -10.0), (0, 1, "detection", 3, -10.0)])
    assert merge_reports(rep).detected.tolist() == [3, 2, 1]


def test_duplicate_cell_is_malformed():
    with pytest.raises(MalformedReportError):
        _report(1, 1, [(0, 0, "silence", None, None), (0, 0, "collision", None, None)])


def test_detection_without_gain_is_malformed():
    with pytest.raises(MalformedReportError):
        _report(1, 1, [(0, 0, "detection", 3, None)])


def test_conflicting_gains_are_malformed():
    rep = _report(2, 1, [(0, 0, "detection", 3, -10.0), (1, 0, "detection", 3, -11.0)])
    with pytest.raises(MalformedReportError):
        merge_reports(rep)


def test_report_records_round_trip():
    rep = _report(3, 2, [(0, 0, "detection", 4, -9.5), (2, 1, "collision", None, None)])
    again = RAReport.from_records(rep.records(), 3, 2)
    np.testing.assert_array_equal(again.outcome, rep.outcome)
    assert again.detections() == rep.detections() == {(0, 0, 4, -9.5)}


# --- campaigns -----------------------------------------------------------

@pytest.fixture(scope="module")
def small_source():
    p = ChannelParams(n_scatterers=60, n_blockers=20)
    lay = drop_entities(p, GeometryConfig(n_rrh=12, n_devices=1, area_side=110.0), 4)
    return DeviceSource(GainModel(lay, p), lay.area_side)


def test_queue_conservation_200_frames(small_source):
    results = []
    stats = run_campaign(RAConfig(T=20, p=0.05, lambda_in=40), small_source, 200, seed=1,
                         on_frame=results.append)
    np.testing.assert_array_equal(stats.active[1:], stats.queue[:-1] + stats.arrivals[1:])
    assert np.all(stats.detected <= stats.active)
    for res in results:
        if res.view is not None and res.view.n_detected:
            truth = res.truth_db
            tt, vv = np.nonzero(res.report.outcome >= 0)
            for t, v in zip(tt, vv):
                j = res.view.column_of(res.report.outcome[t, v])
                assert truth[v, j] >= -18.0
                assert res.report.gain_db[t, v] == truth[v, j]


def test_zero_access_probability(small_source):
    stats = run_campaign(RAConfig(T=10, p=0.0, lambda_in=30), small_source, 10, seed=0, warmup=0)
    assert stats.lambda_out == 0.0
    np.testing.assert_array_equal(stats.active, np.cumsum(stats.arrivals))


def test_single_device_always_heard():
    # one device right next to a lone RRH: p=1, T=1 detects it
    p = ChannelParams(n_scatterers=0, n_blockers=0)
    lay = drop_entities(p, GeometryConfig(n_rrh=1, n_devices=1, area_side=2.0), 0)
    stats = run_campaign(RAConfig(T=1, p=1.0, lambda_in=1), DeviceSource(GainModel(lay, p), 2.0), 1, 0,
                         warmup=0, lambda_ra=1)
    assert stats.detected.tolist() == [1]


def test_abstract_q_matches_model():
    q, T = 0.02, 60
    stats = run_campaign(RAConfig(T=T, p=q, lambda_in=100), DeviceSource(None, 1.0), 400, seed=7,
                         abstract_q=q, lambda_ra=120)
    assert abs(stats.lambda_out - model_lambda_out(q, T, stats.lambda_ra)) <= 3 * stats.lambda_out_stderr
    assert stats.lambda_ra == 120


def test_campaign_is_deterministic(small_source):
    a = run_campaign(RAConfig(T=15, p=0.08, lambda_in=30), small_source, 15, seed=3)
    b = run_campaign(RAConfig(T=15, p=0.08, lambda_in=30), small_source, 15, seed=3)
    np.testing.assert_array_equal(a.detected, b.detected)
    np.testing.assert_array_equal(a.queue, b.queue)


def test_queue_slope_of_linear_growth(small_source):
    stats = run_campaign(RAConfig(T=5, p=0.0, lambda_in=30), small_source, 40, seed=0, warmup=5)
    slope, se = stats.queue_slope()
    assert slope == pytest.approx(30, rel=0.2)
