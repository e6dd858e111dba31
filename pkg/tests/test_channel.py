import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_layout
from cranlink.channel import (
    ChannelParams,
    GainModel,
    GeometryConfig,
    Paths,
    SectorGainMatrix,
    calibrate_d_thr,
    covariance,
    dft_matrix,
    direct_path_gain,
    drop_entities,
    enumerate_paths,
    gain_matrix,
    gain_matrix_reference,
    los_blocked,
    reflected_path_gain,
    sector_beam_power,
    sector_gain,
    steering_vector,
    to_db,
)
from cranlink.errors import ConfigError


# --- entity drop ---------------------------------------------------------

def test_drop_gives_400_sectors_at_default_scale(params):
    layout = drop_entities(params, GeometryConfig(n_rrh=100, n_devices=10, area_side=316.0), 1)
    assert layout.n_rrh * params.S == 400
    layout.check()
    assert np.all(layout.blocker_radii > 0)


def test_drop_rejects_zero_devices(params):
    with pytest.raises(ConfigError):
        drop_entities(params, GeometryConfig(n_rrh=1, n_devices=0), 0)


def test_drop_is_deterministic(params):
    geo = GeometryConfig(n_rrh=5, n_devices=7, area_side=50.0)
    a = drop_entities(params, geo, 42)
    b = drop_entities(params, geo, 42)
    for f in ("rrh_positions", "sector_orientations", "device_positions", "scatterer_positions", "blocker_centers"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_ppp_drop_keeps_at_least_one_rrh_and_device(params):
    layout = drop_entities(params, GeometryConfig(n_rrh=1, n_devices=1, area_side=10.0, ppp=True), 3)
    assert layout.n_rrh >= 1 and layout.n_devices >= 1


@pytest.mark.parametrize("change", [{"M": 10, "S": 4}, {"a_nlos": 1.5}, {"eps_bp": 0.0}, {"alpha_pl": -1.0}, {"gamma_path": -1.0}])
def test_invalid_channel_params(change):
    with pytest.raises(ConfigError):
        ChannelParams(**change).validate()


# --- blockage ------------------------------------------------------------

def test_blocker_on_midpoint_blocks():
    assert los_blocked([0, 0], [10, 0], [[5, 0]], [0.5])


def test_no_blockers():
    assert not los_blocked([0, 0], [10, 0], np.zeros((0, 2)), np.zeros(0))


def test_tangent_blocker_counts_as_blocked():
    # disk of radius 1 centred 1 m above the segment touches it in one point
    assert los_blocked([0, 0], [10, 0], [[5, 1.0]], [1.0])
    assert not los_blocked([0, 0], [10, 0], [[5, 1.0 + 1e-9]], [1.0])


def test_blocker_beyond_segment_end():
    # closest point is the endpoint; distance to centre is 2 > radius
    assert not los_blocked([0, 0], [10, 0], [[12, 0]], [1.5])
    assert los_blocked([0, 0], [10, 0], [[11, 0]], [1.0])


# --- pathloss ------------------------------------------------------------

def test_direct_gain_values(params):
    assert direct_path_gain(0.0, params) == 1.0
    assert direct_path_gain(params.eps_bp, params) == pytest.approx(2 ** -params.alpha_pl)
    assert direct_path_gain(90.0, params) == pytest.approx(3.1623e-4, rel=1e-4)


def test_reflected_gain_values():
    p = ChannelParams(a_nlos=1.0)
    assert reflected_path_gain(0.0, 0.0, p) == 1.0
    p = ChannelParams(a_nlos=0.5)
    assert reflected_path_gain(0.0, p.eps_bp, p) == pytest.approx(0.5 * 2 ** -p.alpha_pl)


@given(st.floats(0, 500), st.floats(0, 500))
def test_reflected_gain_symmetric(a, b):
    p = ChannelParams()
    assert reflected_path_gain(a, b, p) == reflected_path_gain(b, a, p)


@given(st.floats(0, 1e4), st.floats(0, 1e4))
def test_direct_gain_monotone(d1, d2):
    p = ChannelParams()
    lo, hi = sorted((d1, d2))
    assert direct_path_gain(hi, p) <= direct_path_gain(lo, p)


# --- path enumeration ----------------------------------------------------

def test_single_los_path(params):
    lay = make_layout([[0, 0]], [[10, 0]])
    paths = enumerate_paths(lay, 0, 0, params)
    assert len(paths) == 1 and paths.los[0]
    assert paths.dod[0] == pytest.approx(0.0)


def test_blocked_los_without_scatterers(params):
    lay = make_layout([[0, 0]], [[10, 0]], blockers=[[5, 0]])
    assert len(enumerate_paths(lay, 0, 0, params)) == 0


def test_three_scatterers_one_pruned():
    p = ChannelParams(gamma_path=1e-6)
    # two nearby scatterers survive; the far one loses ~(1+1000/10)^-3.5 twice
    scat = [[5, 5], [5, -5], [990, 990]]
    lay = make_layout([[0, 0]], [[10, 0]], scatterers=scat, side=1000.0)
    paths = enumerate_paths(lay, 0, 0, p)
    expected = [reflected_path_gain(np.hypot(*(np.array(z) - [10, 0])), np.hypot(*z), p) for z in scat]
    assert expected[2] < p.gamma_path <= min(expected[:2])
    assert len(paths) == 3  # LOS + two scatterers
    assert paths.los.sum() == 1
    assert np.all(paths.gain >= p.gamma_path)


def test_weak_los_is_pruned_too():
    p = ChannelParams(gamma_path=1e-3)
    lay = make_layout([[0, 0]], [[500, 0]])
    assert len(enumerate_paths(lay, 0, 0, p)) == 0


def test_pruning_is_monotone_in_threshold():
    rng = np.random.default_rng(5)
    lay = make_layout([[50, 50]], [[60, 40]], scatterers=rng.uniform(0, 100, (40, 2)), side=100.0)
    counts = [len(enumerate_paths(lay, 0, 0, ChannelParams(gamma_path=g))) for g in (0.0, 1e-8, 1e-6, 1e-4, 1e-2)]
    assert counts == sorted(counts, reverse=True)


# --- array geometry ------------------------------------------------------

def test_steering_vector_cases():
    np.testing.assert_allclose(steering_vector(np.pi / 2, 8, 0.5), np.ones(8), atol=1e-15)
    np.testing.assert_allclose(steering_vector(0.3, 1, 0.5), [1.0])
    np.testing.assert_allclose(steering_vector(0.0, 2, 0.5), [1.0, -1.0], atol=1e-15)


def test_covariance_cases():
    assert np.all(covariance(Paths([], []), 5, 0.5) == 0)
    K = covariance(Paths([1.0], [np.pi / 2]), 6, 0.5)
    np.testing.assert_allclose(K, np.ones((6, 6)), atol=1e-14)
    K = covariance(Paths([0.3, 0.7], [0.4, 2.1]), 4, 0.5)
    assert np.trace(K).real == pytest.approx(4.0)
    np.testing.assert_allclose(K, K.conj().T)
    assert np.linalg.eigvalsh(K).min() > -1e-12


def test_dft_is_unitary():
    W = dft_matrix(16)
    np.testing.assert_allclose(W.conj().T @ W, np.eye(16), atol=1e-12)


def test_sector_gain_of_identity():
    for i in range(4):
        assert sector_gain(np.eye(16, dtype=complex), i, 16, 4) == pytest.approx(4.0)
    assert sector_gain(np.zeros((16, 16)), 2, 16, 4) == 0.0


def test_sector_gain_rejects_bad_index():
    with pytest.raises(ConfigError):
        sector_gain(np.eye(8), 4, 8, 4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-6, 1.0), st.floats(-np.pi, np.pi)), min_size=1, max_size=6),
       st.sampled_from([(8, 2), (16, 4), (64, 4)]))
def test_sector_partition_identity(paths, shape):
    M, S = shape
    g, th = zip(*paths)
    K = covariance(Paths(g, th), M, 0.5)
    total = sum(sector_gain(K, i, M, S) for i in range(S))
    assert total == pytest.approx(np.trace(K).real, rel=1e-9)
    assert all(sector_gain(K, i, M, S) >= -1e-12 for i in range(S))


@given(st.floats(-np.pi, np.pi))
def test_beam_power_matches_projection(theta):
    M, S, d = 16, 4, 0.5
    a = steering_vector(theta, M, d)
    F = dft_matrix(M)
    expected = [np.sum(np.abs(F[:, i * 4:(i + 1) * 4].conj().T @ a) ** 2) for i in range(S)]
    got = sector_beam_power(np.array([d * np.cos(theta)]), M, S)[0]
    np.testing.assert_allclose(got, expected, rtol=1e-9, atol=1e-9)


# --- gain matrix ---------------------------------------------------------

def test_single_link_broadside_partition(params):
    lay = make_layout([[0, 0]], [[0, 10]])  # orientation 0 -> device at pi/2 is broadside
    G = gain_matrix(lay, params)
    assert G.shape == (params.S, 1)
    assert np.all(np.isfinite(G.values))
    paths = enumerate_paths(lay, 0, 0, params)
    trace = np.trace(covariance(paths, params.M, params.d_ant_over_lambda)).real
    assert G.linear().sum() == pytest.approx(trace, rel=1e-9)


def test_fully_pruned_device_sits_at_floor():
    p = ChannelParams(gamma_path=1e-2)
    lay = make_layout([[0, 0]], [[900, 900]])
    G = gain_matrix(lay, p)
    np.testing.assert_array_equal(G.values, to_db(np.zeros((p.S, 1)), p.linear_floor))
    assert np.all(G.values == -120.0)


def test_fast_route_matches_reference():
    p = ChannelParams(M=16, S=4, n_scatterers=30, n_blockers=10)
    lay = drop_entities(p, GeometryConfig(n_rrh=4, n_devices=6, area_side=60.0), 11)
    fast = GainModel(lay, p).linear(lay.device_positions)
    ref = gain_matrix_reference(lay, p)
    np.testing.assert_allclose(fast, ref, rtol=1e-9, atol=1e-15)


def test_gain_model_independent_of_chunking():
    p = ChannelParams(n_scatterers=60, n_blockers=20)
    lay = drop_entities(p, GeometryConfig(n_rrh=6, n_devices=40, area_side=80.0), 2)
    a = GainModel(lay, p, chunk=32).linear(lay.device_positions)
    b = GainModel(lay, p, chunk=7).linear(lay.device_positions)
    np.testing.assert_array_equal(a, b)


def test_strong_links_concentrate_at_short_range(params):
    lay = drop_entities(params, GeometryConfig(n_rrh=100, n_devices=150, area_side=316.0), 9)
    G = gain_matrix(lay, params).values.reshape(100, params.S, -1).max(axis=1)  # best sector per RRH
    diff = lay.rrh_positions[:, None, :] - lay.device_positions[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    strong = G >= -18.0
    assert np.median(dist[strong]) < 60.0
    bins = [0, 20, 40, 60, 80, 1e9]
    frac = [strong[(dist >= lo) & (dist < hi)].mean() for lo, hi in itertools.pairwise(bins)]
    assert all(a >= b for a, b in itertools.pairwise(frac))


# --- d_thr calibration ---------------------------------------------------

def _brute_force_d_thr(strong_rrh, D):
    best = 0.0
    B, K = strong_rrh.shape
    for k in range(K):
        for a in range(B):
            for b in range(B):
                if strong_rrh[a, k] and strong_rrh[b, k]:
                    best = max(best, D[a, b])
    return best


def test_calibration_fixture_37m():
    S = 2
    lay = make_layout([[0, 0], [37, 0], [200, 0]], [[1, 1], [2, 2], [3, 3]])
    G = np.full((3 * S, 3), -40.0)
    G[0, 0] = G[3, 0] = -10.0  # device 0 strong to RRH 0 and RRH 1
    G[1, 1] = -5.0
    G[5, 2] = -5.0
    d, degenerate = calibrate_d_thr(SectorGainMatrix(G), lay, -18.0, S)
    assert d == pytest.approx(37.0) and not degenerate


def test_calibration_without_strong_links_warns(caplog):
    lay = make_layout([[0, 0], [10, 0]], [[1, 1]])
    d, degenerate = calibrate_d_thr(SectorGainMatrix(np.full((8, 1), -50.0)), lay, -18.0, 4)
    assert d == 0.0 and degenerate
    assert "no device" in caplog.text


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_calibration_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    B, S, K = 5, 2, 6
    lay = make_layout(rng.uniform(0, 100, (B, 2)), rng.uniform(0, 100, (K, 2)), side=100.0)
    G = rng.uniform(-30, -10, (B * S, K))
    d, _ = calibrate_d_thr(SectorGainMatrix(G), lay, -18.0, S)
    strong_rrh = (G >= -18.0).reshape(B, S, K).any(axis=1)
    assert d == pytest.approx(_brute_force_d_thr(strong_rrh, lay.rrh_distances()))
