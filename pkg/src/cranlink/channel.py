"""One-bounce geometric stochastic channel model and sector gain matrix.

RRHs carry an M-element ULA split into S virtual sectors by contiguous groups
of DFT beams. Links are made of an (optionally blocked) direct path plus one
single-bounce path per scatterer; the sector gain is the power the link
covariance puts into the sector's beams.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from cranlink.errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class ChannelParams:
    M: int = 64  # antennas per ULA
    S: int = 4  # sectors per RRH
    d_ant_over_lambda: float = 0.5
    eps_bp: float = 10.0  # breakpoint distance [m]
    alpha_pl: float = 3.5
    a_nlos: float = 0.3
    gamma_path: float = 1e-6  # linear path-pruning threshold
    n_scatterers: int = 500
    n_blockers: int = 200
    blocker_radius: float = 2.0  # [m]
    linear_floor: float = 1e-12

    def validate(self) -> None:
        if self.M < 1 or self.S < 1:
            raise ConfigError(f"M and S must be >= 1 (got M={self.M}, S={self.S})")
        if self.M % self.S:
            raise ConfigError(f"M={self.M} is not divisible by S={self.S}")
        if not 0 < self.a_nlos <= 1:
            raise ConfigError(f"a_nlos must lie in (0, 1], got {self.a_nlos}")
        if self.eps_bp <= 0 or self.alpha_pl <= 0:
            raise ConfigError("eps_bp and alpha_pl must be positive")
        if self.gamma_path < 0:
            raise ConfigError("gamma_path must be nonnegative")
        if self.n_scatterers < 0 or self.n_blockers < 0:
            raise ConfigError("scatterer/blocker counts must be nonnegative")
        if self.n_blockers and self.blocker_radius <= 0:
            raise ConfigError("blocker_radius must be positive")
        if self.linear_floor <= 0:
            raise ConfigError("linear_floor must be positive")


@dataclass
class GeometryConfig:
    n_rrh: int = 100
    n_devices: int = 500
    area_side: float = 316.0
    ppp: bool = False  # draw counts from Poisson(mean = configured count)


@dataclass
class NetworkLayout:
    rrh_positions: np.ndarray  # (B, 2)
    sector_orientations: np.ndarray  # (B,) radians
    device_positions: np.ndarray  # (K, 2)
    scatterer_positions: np.ndarray  # (Z, 2)
    blocker_centers: np.ndarray  # (Nb, 2)
    blocker_radii: np.ndarray  # (Nb,)
    area_side: float

    @property
    def n_rrh(self) -> int:
        return len(self.rrh_positions)

    @property
    def n_devices(self) -> int:
        return len(self.device_positions)

    def rrh_distances(self) -> np.ndarray:
        diff = self.rrh_positions[:, None, :] - self.rrh_positions[None, :, :]
        return np.hypot(diff[..., 0], diff[..., 1])

    def with_devices(self, positions: np.ndarray) -> NetworkLayout:
        return NetworkLayout(
            self.rrh_positions,
            self.sector_orientations,
            np.asarray(positions, dtype=float).reshape(-1, 2),
            self.scatterer_positions,
            self.blocker_centers,
            self.blocker_radii,
            self.area_side,
        )

    def check(self) -> None:
        pts = [self.rrh_positions, self.device_positions, self.scatterer_positions, self.blocker_centers]
        for p in pts:
            if len(p) and (p.min() < 0 or p.max() > self.area_side):
                raise ConfigError("layout entity outside [0, area_side]^2")
        if np.any(self.blocker_radii <= 0):
            raise ConfigError("blocker radii must be strictly positive")
        if self.n_rrh < 1 or self.n_devices < 1:
            raise ConfigError("layout needs at least one RRH and one device")


@dataclass
class Paths:
    """Retained multipath components of one RRH-device link."""

    gain: np.ndarray  # linear large-scale loss per path
    dod: np.ndarray  # azimuth of departure at the RRH [rad]
    los: np.ndarray = field(default=None)  # bool per path

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=float)
        self.dod = np.asarray(self.dod, dtype=float)
        if self.los is None:
            self.los = np.zeros(len(self.gain), dtype=bool)

    def __len__(self) -> int:
        return len(self.gain)


@dataclass
class SectorGainMatrix:
    values: np.ndarray  # (V, K) in dB
    linear_floor: float = 1e-12

    @classmethod
    def from_linear(cls, linear: np.ndarray, linear_floor: float = 1e-12) -> SectorGainMatrix:
        return cls(to_db(linear, linear_floor), linear_floor)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def linear(self) -> np.ndarray:
        return 10.0 ** (self.values / 10.0)


def to_db(linear: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    return 10.0 * np.log10(np.maximum(linear, floor))


def _uniform_points(rng: np.random.Generator, n: int, side: float) -> np.ndarray:
    return rng.uniform(0.0, side, size=(n, 2))


def drop_entities(params: ChannelParams, geometry: GeometryConfig, rng) -> NetworkLayout:
    """Drop RRHs, devices, scatterers and blockers uniformly over the square area.

    ``rng`` may be a seed or a ``numpy.random.Generator``. In PPP mode each count
    is Poisson with the configured value as its mean.
    """
    params.validate()
    if geometry.area_side <= 0:
        raise ConfigError(f"area_side must be positive, got {geometry.area_side}")
    if geometry.n_rrh < 1:
        raise ConfigError("n_rrh must be >= 1")
    if geometry.n_devices < 1:
        raise ConfigError("n_devices must be >= 1")
    rng = np.random.default_rng(rng)

    counts = [geometry.n_rrh, geometry.n_devices, params.n_scatterers, params.n_blockers]
    if geometry.ppp:
        counts = [int(rng.poisson(c)) for c in counts]
        counts[0] = max(counts[0], 1)
        counts[1] = max(counts[1], 1)
    n_rrh, n_dev, n_scat, n_blk = counts
    side = geometry.area_side
    rrh = _uniform_points(rng, n_rrh, side)
    orient = rng.uniform(0.0, 2 * np.pi, size=n_rrh)
    dev = _uniform_points(rng, n_dev, side)
    scat = _uniform_points(rng, n_scat, side)
    blk = _uniform_points(rng, n_blk, side)
    return NetworkLayout(rrh, orient, dev, scat, blk, np.full(n_blk, float(params.blocker_radius)), side)


def _segment_blocked(tx: np.ndarray, rx: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Vectorised closed-disk test; ``tx``/``rx`` are (n, 2), result is (n,)."""
    tx = np.atleast_2d(tx)
    rx = np.atleast_2d(rx)
    if len(centers) == 0:
        return np.zeros(len(tx), dtype=bool)
    seg = rx - tx  # (n, 2)
    seg_len2 = np.einsum("ij,ij->i", seg, seg)
    rel = centers[None, :, :] - tx[:, None, :]  # (n, Nb, 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.einsum("ikj,ij->ik", rel, seg) / seg_len2[:, None]
    s = np.clip(np.nan_to_num(s), 0.0, 1.0)
    closest = tx[:, None, :] + s[..., None] * seg[:, None, :]
    d2 = np.sum((centers[None, :, :] - closest) ** 2, axis=-1)
    return np.any(d2 <= radii[None, :] ** 2, axis=1)


def los_blocked(tx, rx, blocker_centers, blocker_radii) -> bool:
    """True iff the segment tx-rx touches any closed blocker disk."""
    tx = np.asarray(tx, dtype=float)
    rx = np.asarray(rx, dtype=float)
    centers = np.asarray(blocker_centers, dtype=float).reshape(-1, 2)
    radii = np.asarray(blocker_radii, dtype=float).reshape(-1)
    return bool(_segment_blocked(tx[None], rx[None], centers, radii)[0])


def direct_path_gain(d, params: ChannelParams):
    """Smooth-transition pathloss ``(1 + d/eps_bp) ** -alpha_pl``."""
    return (1.0 + np.asarray(d, dtype=float) / params.eps_bp) ** (-params.alpha_pl)


def reflected_path_gain(d_uz, d_zr, params: ChannelParams):
    return params.a_nlos * (direct_path_gain(d_uz, params) * direct_path_gain(d_zr, params))


def _azimuth(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    diff = dst - src
    return np.arctan2(diff[..., 1], diff[..., 0])


def enumerate_paths(layout: NetworkLayout, j: int, k: int, params: ChannelParams) -> Paths:
    """Paths between RRH ``j`` and device ``k``; DODs are absolute azimuths."""
    r = layout.rrh_positions[j]
    u = layout.device_positions[k]
    gains, dods, los = [], [], []
    if not los_blocked(r, u, layout.blocker_centers, layout.blocker_radii):
        gains.append(float(direct_path_gain(np.hypot(*(u - r)), params)))
        dods.append(float(_azimuth(r, u)))
        los.append(True)
    z = layout.scatterer_positions
    if len(z):
        d_uz = np.hypot(*(z - u).T)
        d_zr = np.hypot(*(z - r).T)
        gains.extend(reflected_path_gain(d_uz, d_zr, params).tolist())
        dods.extend(_azimuth(r, z).tolist())
        los.extend([False] * len(z))
    gains = np.asarray(gains, dtype=float)
    keep = gains >= params.gamma_path
    return Paths(gains[keep], np.asarray(dods, dtype=float)[keep], np.asarray(los, dtype=bool)[keep])


def steering_vector(theta: float, M: int, d_ant_over_lambda: float) -> np.ndarray:
    m = np.arange(M)
    return np.exp(-2j * np.pi * m * d_ant_over_lambda * np.cos(theta))


def covariance(paths: Paths, M: int, d_ant_over_lambda: float, rotation: float = 0.0) -> np.ndarray:
    """Large-scale covariance ``sum_n L_n a(theta_n) a(theta_n)^H``."""
    K = np.zeros((M, M), dtype=complex)
    for gain, theta in zip(paths.gain, paths.dod):
        a = steering_vector(theta - rotation, M, d_ant_over_lambda)
        K += gain * np.outer(a, a.conj())
    return K


def dft_matrix(M: int) -> np.ndarray:
    """Unit-norm-column DFT matrix, ``W[m, x] = exp(-2j*pi*m*x/M) / sqrt(M)``."""
    m = np.arange(M)
    return np.exp(-2j * np.pi * np.outer(m, m) / M) / np.sqrt(M)


def sector_gain(K: np.ndarray, i: int, M: int, S: int) -> float:
    """Power of covariance ``K`` inside the DFT beams of sector ``i`` (0-based)."""
    if M % S:
        raise ConfigError(f"M={M} is not divisible by S={S}")
    if not 0 <= i < S:
        raise ConfigError(f"sector index {i} outside [0, {S})")
    width = M // S
    F = dft_matrix(M)[:, i * width:(i + 1) * width]
    return float(np.real(np.trace(F.conj().T @ K @ F)))


def sector_beam_power(u: np.ndarray, M: int, S: int) -> np.ndarray:
    """Per-sector power ``||F_i^H a||^2`` of unit-gain paths with ``u = d cos(theta)``.

    Same quantity as ``sector_gain`` of a rank-one covariance, but evaluated in
    closed form: the power a path leaks into DFT beam ``x`` is the Fejer kernel
    ``sin^2(pi M delta) / (M sin^2(pi delta))`` with ``delta = x/M - u`` (mod 1).
    Returns an array of shape ``(len(u), S)``.
    """
    u = np.asarray(u, dtype=float).reshape(-1)
    delta = np.arange(M)[None, :] / M - u[:, None]
    delta -= np.round(delta)
    beams = M * (np.sinc(M * delta) / np.sinc(delta)) ** 2
    return beams.reshape(len(u), S, M // S).sum(axis=2)


class GainModel:
    """Sector gains of arbitrary device positions against a fixed RRH/scatterer layout.

    The sector split of every RRH-scatterer departure direction is fixed by the
    layout, so it is tabulated once; a new device only costs its direct paths
    plus a weighted sum over the tabulated scatterer paths.
    """

    def __init__(self, layout: NetworkLayout, params: ChannelParams, chunk: int = 32):
        params.validate()
        self.layout = layout
        self.params = params
        self.chunk = chunk
        r = layout.rrh_positions
        z = layout.scatterer_positions
        B, Z = len(r), len(z)
        self._g_rz = direct_path_gain(np.hypot(*(z[None, :, :] - r[:, None, :]).transpose(2, 0, 1)), params)
        u_rz = params.d_ant_over_lambda * np.cos(
            _azimuth(r[:, None, :], z[None, :, :]) - layout.sector_orientations[:, None]
        )
        self._p_rz = sector_beam_power(u_rz.ravel(), params.M, params.S).reshape(B, Z, params.S)

    @property
    def n_sectors(self) -> int:
        return self.layout.n_rrh * self.params.S

    def linear(self, device_positions: np.ndarray) -> np.ndarray:
        """Linear sector gains, shape ``(V, n)`` with row ``v = S*b + s``."""
        pos = np.asarray(device_positions, dtype=float).reshape(-1, 2)
        out = np.empty((self.n_sectors, len(pos)))
        for start in range(0, len(pos), self.chunk):
            block = pos[start:start + self.chunk]
            out[:, start:start + len(block)] = self._chunk(block)
        return out

    def db(self, device_positions: np.ndarray) -> np.ndarray:
        return to_db(self.linear(device_positions), self.params.linear_floor)

    def _chunk(self, u: np.ndarray) -> np.ndarray:
        p = self.params
        lay = self.layout
        B, S, n = lay.n_rrh, p.S, len(u)
        r = lay.rrh_positions

        # direct paths
        tx = np.broadcast_to(r[None, :, :], (n, B, 2)).reshape(-1, 2)
        rx = np.broadcast_to(u[:, None, :], (n, B, 2)).reshape(-1, 2)
        g = direct_path_gain(np.hypot(*(rx - tx).T), p)
        keep = g >= p.gamma_path
        idx = np.flatnonzero(keep)
        if len(idx):
            keep[idx[_segment_blocked(tx[idx], rx[idx], lay.blocker_centers, lay.blocker_radii)]] = False
        theta = _azimuth(tx, rx) - np.tile(lay.sector_orientations, n)
        acc = sector_beam_power(p.d_ant_over_lambda * np.cos(theta), p.M, S) * np.where(keep, g, 0.0)[:, None]
        acc = acc.reshape(n, B, S)

        # single-bounce paths; einsum without optimisation sums each entry in
        # scatterer order independently of the chunk size
        z = lay.scatterer_positions
        if len(z):
            g_uz = direct_path_gain(np.hypot(*(z[None, :, :] - u[:, None, :]).transpose(2, 0, 1)), p)
            L = p.a_nlos * (g_uz[:, None, :] * self._g_rz[None, :, :])  # (n, B, Z)
            L[L < p.gamma_path] = 0.0
            acc = acc + np.einsum("kbz,bzs->kbs", L, self._p_rz, optimize=False)

        return acc.reshape(n, B * S).T


def gain_matrix(layout: NetworkLayout, params: ChannelParams) -> SectorGainMatrix:
    """Ground-truth sector gain matrix of every device in ``layout`` (dB, V x K)."""
    layout.check()
    lin = GainModel(layout, params).linear(layout.device_positions)
    return SectorGainMatrix.from_linear(lin, params.linear_floor)


def gain_matrix_reference(layout: NetworkLayout, params: ChannelParams) -> np.ndarray:
    """Slow explicit path: enumerate paths, build covariances, project onto sectors.

    Returns linear gains. Used to cross-check the closed-form route in ``GainModel``.
    """
    B, S, K = layout.n_rrh, params.S, layout.n_devices
    out = np.zeros((B * S, K))
    for j in range(B):
        for k in range(K):
            paths = enumerate_paths(layout, j, k, params)
            cov = covariance(paths, params.M, params.d_ant_over_lambda, layout.sector_orientations[j])
            for i in range(S):
                out[j * S + i, k] = sector_gain(cov, i, params.M, S)
    return out


def calibrate_d_thr(G: SectorGainMatrix, layout: NetworkLayout, Gamma: float, S: int) -> tuple[float, bool]:
    """Smallest RRH separation that never splits a strong device on this draw.

    Returns ``(d_thr, degenerate)``; ``degenerate`` is True (and d_thr 0) when no
    device is strong to sectors of two distinct RRHs.
    """
    strong = G.values >= Gamma
    B = layout.n_rrh
    strong_rrh = strong.reshape(B, S, -1).any(axis=1)  # (B, K)
    dist = layout.rrh_distances()
    best = 0.0
    found = False
    for k in np.flatnonzero(strong_rrh.sum(axis=0) >= 2):
        rr = np.flatnonzero(strong_rrh[:, k])
        best = max(best, float(dist[np.ix_(rr, rr)].max()))
        found = True
    if not found:
        log.warning("no device is strong to two distinct RRHs; d_thr defaults to 0")
    return best, not found
