"""Slotted C-RAN random access: arrivals, pilot slots, central-unit merge, queues."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from cranlink.errors import ConfigError, MalformedReportError
from cranlink.rng import substream

log = logging.getLogger(__name__)

SILENCE = -1
COLLISION = -2


@dataclass
class RAConfig:
    T: int = 100
    p: float = 0.045
    lambda_in: float = 500.0
    Gamma: float = -18.0
    rho: float = 0.99

    def validate(self) -> None:
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"p must lie in [0, 1], got {self.p}")
        if self.lambda_in <= 0:
            raise ConfigError(f"lambda_in must be positive, got {self.lambda_in}")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")


def p_star(rho: float, lambda_in: float, theta: float) -> float:
    """Access probability meeting the delay target: ``1 - (1-rho)**(1/(theta*lambda_in))``."""
    if not 0.0 < rho < 1.0:
        raise ConfigError(f"p_star needs 0 < rho < 1, got rho={rho}")
    if theta * lambda_in < 1:
        raise ConfigError(f"p_star needs theta*lambda_in >= 1, got {theta * lambda_in}")
    return 1.0 - (1.0 - rho) ** (1.0 / (theta * lambda_in))


def model_lambda_out(q: float, T: int, lambda_ra: float) -> float:
    """Rule-of-thumb detections per frame if each slot detects a device w.p. ``q``."""
    return lambda_ra * (1.0 - (1.0 - q) ** T)


def slots_for(theta: float, lambda_in: float) -> int:
    return max(1, int(round(theta * lambda_in)))


@dataclass
class RAReport:
    """Per-slot, per-sector outcomes of one RA block.

    ``outcome[t, v]`` is ``SILENCE``, ``COLLISION`` or the detected device ID;
    ``gain_db[t, v]`` holds the reported link gain (NaN unless a detection).
    """

    outcome: np.ndarray  # (T, V) int64
    gain_db: np.ndarray  # (T, V) float

    @property
    def n_slots(self) -> int:
        return self.outcome.shape[0]

    @property
    def n_sectors(self) -> int:
        return self.outcome.shape[1]

    @classmethod
    def from_records(cls, records: Iterable[tuple], n_slots: int, n_sectors: int) -> RAReport:
        """Build a report from ``(slot, sector, outcome, device, gain_db)`` rows.

        ``outcome`` is one of ``"silence"``, ``"collision"``, ``"detection"``.
        Missing cells default to silence; a repeated ``(slot, sector)`` is an error.
        """
        outcome = np.full((n_slots, n_sectors), SILENCE, dtype=np.int64)
        gain = np.full((n_slots, n_sectors), np.nan)
        seen = np.zeros((n_slots, n_sectors), dtype=bool)
        for t, v, kind, device, g in records:
            t, v = int(t), int(v)
            if not (0 <= t < n_slots and 0 <= v < n_sectors):
                raise MalformedReportError(f"cell (slot={t}, sector={v}) outside the report")
            if seen[t, v]:
                raise MalformedReportError(f"sector {v} reports two outcomes in slot {t}")
            seen[t, v] = True
            if kind == "silence":
                continue
            if kind == "collision":
                outcome[t, v] = COLLISION
            elif kind == "detection":
                if device is None or g is None or not np.isfinite(g):
                    raise MalformedReportError(f"detection at (slot={t}, sector={v}) lacks device or gain")
                outcome[t, v] = int(device)
                gain[t, v] = float(g)
            else:
                raise MalformedReportError(f"unknown outcome {kind!r}")
        return cls(outcome, gain)

    def records(self) -> Iterator[tuple]:
        for t in range(self.n_slots):
            for v in range(self.n_sectors):
                o = int(self.outcome[t, v])
                if o == SILENCE:
                    yield t, v, "silence", None, None
                elif o == COLLISION:
                    yield t, v, "collision", None, None
                else:
                    yield t, v, "detection", o, float(self.gain_db[t, v])

    def detections(self) -> set[tuple[int, int, int, float]]:
        tt, vv = np.nonzero(self.outcome >= 0)
        return {(int(t), int(v), int(self.outcome[t, v]), float(self.gain_db[t, v])) for t, v in zip(tt, vv)}


@dataclass
class CentralView:
    """What the central unit knows after merging all sector reports of a frame.

    Detected devices are re-indexed ``0..|D|-1`` in order of first detection
    slot, ties broken by sector index.
    """

    detected: np.ndarray  # (n,) device IDs, o_j = detected[j]
    outcome: np.ndarray  # (T, V)
    gain_db: np.ndarray  # (T, V)
    slots_detected: np.ndarray  # (T, n) bool: device j detected somewhere in slot t
    detection_counts: np.ndarray  # (V, n) int: slots in which sector v detected device j
    known_gains: np.ndarray  # (V, n) float, NaN where unknown
    frame: int = 0

    @property
    def n_detected(self) -> int:
        return len(self.detected)

    @property
    def n_slots(self) -> int:
        return self.outcome.shape[0]

    @property
    def n_sectors(self) -> int:
        return self.outcome.shape[1]

    @property
    def silence(self) -> np.ndarray:
        return self.outcome == SILENCE

    def silence_sectors(self, t: int) -> set[int]:
        return set(np.flatnonzero(self.outcome[t] == SILENCE).tolist())

    def detectors(self, j: int) -> set[int]:
        return set(np.flatnonzero(self.detection_counts[:, j]).tolist())

    def other_detectors(self, t: int, j: int) -> set[int]:
        row = self.outcome[t]
        return set(np.flatnonzero((row >= 0) & (row != self.detected[j])).tolist())

    def slots_of(self, j: int) -> set[int]:
        return set(np.flatnonzero(self.slots_detected[:, j]).tolist())

    def column_of(self, device_id: int) -> int:
        return int(np.flatnonzero(self.detected == device_id)[0])

    def to_report(self) -> RAReport:
        return RAReport(self.outcome.copy(), self.gain_db.copy())


def merge_reports(report: RAReport, frame: int = 0) -> CentralView:
    out = report.outcome
    T, V = out.shape
    flat = out.ravel()  # row-major: slot first, then sector
    pos = np.flatnonzero(flat >= 0)
    ids, first = np.unique(flat[pos], return_index=True)
    detected = ids[np.argsort(pos[first], kind="stable")]
    n = len(detected)

    col = np.full(out.shape, -1, dtype=np.int64)
    if n:
        lookup = np.searchsorted(ids, flat[pos])
        order = np.empty(len(ids), dtype=np.int64)
        order[np.argsort(pos[first], kind="stable")] = np.arange(n)
        col.ravel()[pos] = order[lookup]
    tt, vv = np.nonzero(col >= 0)
    jj = col[tt, vv]

    slots_detected = np.zeros((T, n), dtype=bool)
    slots_detected[tt, jj] = True
    counts = np.zeros((V, n), dtype=np.int64)
    np.add.at(counts, (vv, jj), 1)
    known = np.full((V, n), np.nan)
    gains = report.gain_db[tt, vv]
    known[vv, jj] = gains
    if np.any(known[vv, jj] != gains):  # some (sector, device) pair was written twice with different gains
        raise MalformedReportError("one sector reports different gains for the same device")
    return CentralView(detected, out, report.gain_db, slots_detected, counts, known, frame)


def poisson_arrivals(lambda_in: float, rng: np.random.Generator, next_id: int = 0) -> np.ndarray:
    """Fresh consecutive device IDs starting at ``next_id``; count ~ Poisson(lambda_in)."""
    if lambda_in <= 0:
        raise ConfigError(f"lambda_in must be positive, got {lambda_in}")
    n = int(rng.poisson(lambda_in))
    return np.arange(next_id, next_id + n, dtype=np.int64)


def simulate_slot(transmitters: Iterable[int], G: np.ndarray, Gamma: float, v: int) -> tuple:
    """Outcome at sector ``v`` when ``transmitters`` (column indices of ``G``) send pilots.

    Returns ``("silence",)``, ``("collision",)`` or ``("detection", j, gain_db)``.
    """
    strong = [j for j in transmitters if G[v, j] >= Gamma]
    if not strong:
        return ("silence",)
    if len(strong) > 1:
        return ("collision",)
    j = strong[0]
    return ("detection", j, float(G[v, j]))


def slot_outcomes(chi: np.ndarray, strong: np.ndarray, ids: np.ndarray, gains_db: np.ndarray) -> RAReport:
    """All sector outcomes of an RA block.

    ``chi`` is the (T, n) pilot-activity matrix, ``strong`` the (V, n) strong-link
    mask of the active devices, ``ids`` their device IDs and ``gains_db`` (V, n).
    """
    T = chi.shape[0]
    V, n = strong.shape
    if n == 0:
        return RAReport(np.full((T, V), SILENCE, dtype=np.int64), np.full((T, V), np.nan))
    c = chi.astype(np.float64)
    s = strong.astype(np.float64)
    counts = c @ s.T  # (T, V) strong transmitters per sector and slot
    label = c @ (s * np.arange(1, n + 1)[None, :]).T  # local index + 1 when counts == 1
    counts = np.rint(counts).astype(np.int64)
    outcome = np.where(counts == 0, SILENCE, COLLISION).astype(np.int64)
    gain = np.full((T, V), np.nan)
    tt, vv = np.nonzero(counts == 1)
    local = np.rint(label[tt, vv]).astype(np.int64) - 1
    outcome[tt, vv] = ids[local]
    gain[tt, vv] = gains_db[vv, local]
    return RAReport(outcome, gain)


@dataclass
class FrameState:
    """Active devices at the start of RA block ``frame_index``."""

    frame_index: int
    ids: np.ndarray
    positions: np.ndarray  # (n, 2)
    gains_db: np.ndarray  # (V, n); empty rows in abstract-q mode
    next_id: int
    arrivals_log: list = field(default_factory=list)
    detected_log: list = field(default_factory=list)

    @property
    def active(self) -> int:
        return len(self.ids)

    def keep(self, mask: np.ndarray) -> FrameState:
        return FrameState(
            self.frame_index, self.ids[mask], self.positions[mask], self.gains_db[:, mask],
            self.next_id, self.arrivals_log, self.detected_log,
        )

    def extend(self, ids, positions, gains_db) -> FrameState:
        return FrameState(
            self.frame_index,
            np.concatenate([self.ids, ids]),
            np.concatenate([self.positions, positions]),
            np.concatenate([self.gains_db, gains_db], axis=1),
            max(self.next_id, int(ids[-1]) + 1 if len(ids) else self.next_id),
            self.arrivals_log,
            self.detected_log,
        )


class DeviceSource:
    """Places new devices uniformly and evaluates their sector-gain columns."""

    def __init__(self, gain_model, area_side: float):
        self.gain_model = gain_model
        self.area_side = area_side

    @property
    def n_sectors(self) -> int:
        return 0 if self.gain_model is None else self.gain_model.n_sectors

    def new(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        pos = rng.uniform(0.0, self.area_side, size=(n, 2))
        if self.gain_model is None:
            return pos, np.zeros((0, n))
        return pos, self.gain_model.db(pos)


def empty_state(n_sectors: int) -> FrameState:
    return FrameState(0, np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros((n_sectors, 0)), 0)


def admit(state: FrameState, n: int, source: DeviceSource, seed: int, frame: int) -> FrameState:
    ids = np.arange(state.next_id, state.next_id + n, dtype=np.int64)
    pos, gains = source.new(n, substream(seed, "positions", frame))
    return state.extend(ids, pos, gains)


@dataclass
class FrameResult:
    frame: int
    arrivals: int
    active: int
    detected: int
    report: RAReport | None
    view: CentralView | None
    truth_db: np.ndarray | None  # (V, |D|) ground truth of detected devices
    uncoverable: int = 0


def simulate_frame(state: FrameState, config: RAConfig, rng: np.random.Generator, abstract_q: float | None = None):
    """Run one RA block on ``state``; returns ``(FrameResult, surviving state)``.

    The caller admits arrivals into the surviving state (queue conservation).
    In abstract-q mode every active device is detected independently in each
    slot with probability ``abstract_q`` and no sector report is produced.
    """
    n = state.active
    f = state.frame_index
    if abstract_q is not None:
        hit = rng.random((config.T, n)) < abstract_q
        det = hit.any(axis=0)
        result = FrameResult(f, 0, n, int(det.sum()), None, None, None)
        return result, state.keep(~det)

    chi = rng.random((config.T, n)) < config.p
    strong = state.gains_db >= config.Gamma
    report = slot_outcomes(chi, strong, state.ids, state.gains_db)
    view = merge_reports(report, frame=f)
    det = np.isin(state.ids, view.detected)
    local = np.searchsorted(state.ids, view.detected)  # ids are kept sorted
    truth = state.gains_db[:, local]
    uncoverable = int((~strong.any(axis=0)).sum())
    result = FrameResult(f, 0, n, len(view.detected), report, view, truth, uncoverable)
    return result, state.keep(~det)


@dataclass
class CampaignStats:
    arrivals: np.ndarray
    active: np.ndarray
    detected: np.ndarray
    queue: np.ndarray  # undetected devices carried into the next frame
    uncoverable: np.ndarray
    warmup: int

    def _tail(self, x):
        return x[self.warmup:] if len(x) > self.warmup else x

    @property
    def lambda_out(self) -> float:
        return float(np.mean(self._tail(self.detected)))

    @property
    def lambda_ra(self) -> float:
        return float(np.mean(self._tail(self.active)))

    @property
    def lambda_in(self) -> float:
        return float(np.mean(self._tail(self.arrivals)))

    @property
    def lambda_out_stderr(self) -> float:
        x = self._tail(self.detected)
        return float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else float("nan")

    def queue_slope(self) -> tuple[float, float]:
        """Least-squares slope of the active-set size after warm-up and its standard error."""
        y = self._tail(self.active).astype(float)
        x = np.arange(len(y), dtype=float)
        if len(y) < 3:
            return float("nan"), float("nan")
        xc = x - x.mean()
        slope = float(xc @ (y - y.mean()) / (xc @ xc))
        resid = y - y.mean() - slope * xc
        se = float(np.sqrt(resid @ resid / (len(y) - 2) / (xc @ xc)))
        return slope, se


def run_campaign(
    config: RAConfig,
    source: DeviceSource,
    n_frames: int,
    seed: int,
    warmup: int = 20,
    abstract_q: float | None = None,
    lambda_ra: int | None = None,
    on_frame: Callable[[FrameResult], None] | None = None,
) -> CampaignStats:
    """Frame loop with queue carry-over.

    ``lambda_ra`` forces the active-set size of every frame: instead of Poisson
    arrivals the queue is topped up with fresh devices to exactly that many.
    ``on_frame`` receives each ``FrameResult`` as it is produced.
    """
    config.validate()
    if n_frames < 1:
        raise ConfigError("n_frames must be >= 1")
    if abstract_q is not None and not 0.0 <= abstract_q <= 1.0:
        raise ConfigError(f"abstract q must lie in [0, 1], got {abstract_q}")
    if lambda_ra is not None and lambda_ra < 0:
        raise ConfigError("forced lambda_ra must be nonnegative")

    rows = []
    state = empty_state(source.n_sectors)
    for f in range(n_frames):
        state.frame_index = f
        if lambda_ra is None:
            n_new = len(poisson_arrivals(config.lambda_in, substream(seed, "arrivals", f)))
        else:
            n_new = max(0, lambda_ra - state.active)
        state = admit(state, n_new, source, seed, f)
        result, survivors = simulate_frame(state, config, substream(seed, "pilots", f), abstract_q)
        result.arrivals = n_new
        assert survivors.active == result.active - result.detected
        rows.append((n_new, result.active, result.detected, survivors.active, result.uncoverable))
        if on_frame is not None:
            on_frame(result)
        state = survivors
    arr = np.asarray(rows, dtype=np.int64)
    return CampaignStats(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4], warmup)
