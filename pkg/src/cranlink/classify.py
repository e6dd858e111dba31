"""Sector-device link classification from central-unit RA views.

Known strong links come straight from sector detections; known weak links are
inferred from pilot slots and from RRH separation. The unknown remainder is
filled either by an alpha-biased coin (baseline) or by thresholding a low-rank
latent-factor completion of the dB gain matrix.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from cranlink.errors import ConfigError, SolverDivergenceError
from cranlink.rasim import CentralView

log = logging.getLogger(__name__)


@dataclass
class ObservationSets:
    """Known cells of a V x n sector-device grid.

    ``omega1`` marks known-strong cells (``gains`` holds their dB values),
    ``omega0`` known-weak ones. Strong wins when both are set.
    """

    omega1: np.ndarray
    gains: np.ndarray
    omega0: np.ndarray
    device_ids: np.ndarray = None

    def __post_init__(self):
        self.omega1 = np.asarray(self.omega1, dtype=bool)
        self.omega0 = np.asarray(self.omega0, dtype=bool) & ~self.omega1
        self.gains = np.where(self.omega1, self.gains, np.nan)
        if self.device_ids is None:
            self.device_ids = np.arange(self.omega1.shape[1])

    @property
    def dims(self) -> tuple[int, int]:
        return self.omega1.shape

    @property
    def known(self) -> np.ndarray:
        return self.omega1 | self.omega0

    @property
    def unknown(self) -> np.ndarray:
        return ~self.known

    def select(self, cols: np.ndarray) -> ObservationSets:
        return ObservationSets(self.omega1[:, cols], self.gains[:, cols], self.omega0[:, cols], self.device_ids[cols])


def known_strong(view: CentralView) -> tuple[np.ndarray, np.ndarray]:
    """Cells (sector, detected-device) where the sector itself detected the device."""
    omega1 = view.detection_counts > 0
    return omega1, np.where(omega1, view.known_gains, np.nan)


def infer_zeros_pilot(view: CentralView) -> np.ndarray:
    """Sectors that heard silence or another device in a slot where device j was detected."""
    out = view.outcome
    heard = ((out == -1) | (out >= 0)).astype(np.float64)  # silence or any detection
    slots = view.slots_detected.astype(np.float64)  # (T, n)
    counts = heard.T @ slots  # (V, n): slots of T_j where v was silent or detected someone
    # remove the slots in which v detected j itself
    return np.rint(counts).astype(np.int64) - view.detection_counts > 0


def infer_zeros_distance(view: CentralView, rrh_distances: np.ndarray, d_thr: float, S: int) -> np.ndarray:
    """Sectors whose RRH lies farther than ``d_thr`` from some RRH that detected device j."""
    if d_thr < 0:
        raise ConfigError(f"d_thr must be nonnegative, got {d_thr}")
    B = rrh_distances.shape[0]
    V, n = view.detection_counts.shape
    if V != B * S:
        raise ConfigError(f"view has {V} sectors but layout gives {B}x{S}")
    det_rrh = (view.detection_counts > 0).reshape(B, S, n).any(axis=1).astype(np.float64)  # (B, n)
    far = (rrh_distances > d_thr).astype(np.float64)
    zero_rrh = far @ det_rrh > 0  # (B, n)
    return np.repeat(zero_rrh, S, axis=0)


def observations(view: CentralView, rrh_distances: np.ndarray, d_thr: float, S: int) -> ObservationSets:
    omega1, gains = known_strong(view)
    omega0 = infer_zeros_pilot(view)
    if np.isfinite(d_thr):
        omega0 |= infer_zeros_distance(view, rrh_distances, d_thr, S)
    return ObservationSets(omega1, gains, omega0, view.detected.copy())


def baseline_classify(obs: ObservationSets, alpha: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    coin = rng.random(obs.dims) < alpha
    chat = np.where(obs.unknown, coin, obs.omega1)
    return chat.astype(np.int8)


@dataclass
class McParams:
    lambda_reg: float = 20.0
    r: int = 200
    step: float = 5e-5
    max_iters: int = 1000
    eps_stop: float = 1e-2
    gamma_minus: float = -18.0
    solver: str = "als"
    init_scale: float = 0.1  # init std is init_scale / sqrt(r)

    def validate(self) -> None:
        if self.solver not in ("als", "gradient"):
            raise ConfigError(f"solver must be 'als' or 'gradient', got {self.solver!r}")
        for name in ("lambda_reg", "step", "eps_stop", "init_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.r < 1 or self.max_iters < 1:
            raise ConfigError("r and max_iters must be >= 1")


@dataclass
class FactorPair:
    theta: np.ndarray  # (V, r)
    x: np.ndarray  # (n, r)
    trace: list = field(default_factory=list)  # (iter, objective, normalized_error)

    @property
    def r(self) -> int:
        return self.theta.shape[1]

    def estimate(self) -> np.ndarray:
        return self.theta @ self.x.T

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1


def completion_target(obs: ObservationSets, gamma_minus: float) -> tuple[np.ndarray, np.ndarray]:
    """Observation mask and target values (known gains, or ``gamma_minus`` on known-weak cells)."""
    mask = obs.known
    target = np.where(obs.omega1, obs.gains, np.where(obs.omega0, gamma_minus, 0.0))
    return mask, target


def objective(theta, x, mask, target, lambda_reg) -> float:
    resid = np.where(mask, target - theta @ x.T, 0.0)
    return float(np.sum(resid**2) + lambda_reg * (np.sum(theta**2) + np.sum(x**2)))


def gradients(theta, x, mask, target, lambda_reg) -> tuple[np.ndarray, np.ndarray]:
    resid = np.where(mask, theta @ x.T - target, 0.0)
    return 2 * resid @ x + 2 * lambda_reg * theta, 2 * resid.T @ theta + 2 * lambda_reg * x


def _normalized_error(sq_err: float, scale: float) -> float:
    return sq_err / scale if scale > 0 else 0.0


def _ridge_rows(other: np.ndarray, mask: np.ndarray, target: np.ndarray, lam: float, chunk: int = 64) -> np.ndarray:
    """Solve ``min_w ||m_i * (y_i - other w)||^2 + lam ||w||^2`` for every row ``i``."""
    r = other.shape[1]
    full = other.T @ other
    eye = lam * np.eye(r)
    rhs = (np.where(mask, target, 0.0)) @ other  # (rows, r)
    out = np.empty((mask.shape[0], r))
    for start in range(0, mask.shape[0], chunk):
        stop = min(start + chunk, mask.shape[0])
        A = np.empty((stop - start, r, r))
        for k, i in enumerate(range(start, stop)):
            obs = mask[i]
            n_obs = int(obs.sum())
            if n_obs <= len(obs) - n_obs:
                sub = other[obs]
                A[k] = sub.T @ sub + eye
            else:
                sub = other[~obs]
                A[k] = full - sub.T @ sub + eye
        out[start:stop] = np.linalg.solve(A, rhs[start:stop, :, None])[..., 0]
    return out


def mc_fit(obs: ObservationSets, params: McParams, rng: np.random.Generator) -> FactorPair:
    """Regularized latent-factor fit of the known cells.

    Runs until the normalized training error drops to ``eps_stop`` or
    ``max_iters`` sweeps have been made. ``trace[0]`` is the initial point.
    """
    params.validate()
    mask, target = completion_target(obs, params.gamma_minus)
    V, n = mask.shape
    if V == 0 or n == 0 or not mask.any():
        raise ConfigError("cannot fit factors without any observed cell")
    lam = params.lambda_reg
    sd = params.init_scale / np.sqrt(params.r)
    theta = rng.normal(0.0, sd, size=(V, params.r))
    x = rng.normal(0.0, sd, size=(n, params.r))
    scale = float(np.sum(np.where(mask, target, 0.0) ** 2))

    def record(it):
        with np.errstate(over="ignore", invalid="ignore"):
            resid = np.where(mask, target - theta @ x.T, 0.0)
            sq = float(np.sum(resid**2))
            obj = sq + lam * (float(np.sum(theta**2)) + float(np.sum(x**2)))
        if not np.isfinite(obj):
            raise SolverDivergenceError(
                f"objective diverged at iteration {it} ({params.solver} solver, step={params.step})"
            )
        err = _normalized_error(sq, scale)
        trace.append((it, obj, err))
        return err

    trace: list = []
    err = record(0)
    it = 0
    while err > params.eps_stop and it < params.max_iters:
        it += 1
        with np.errstate(over="ignore", invalid="ignore"):
            if params.solver == "als":
                theta = _ridge_rows(x, mask, target, lam)
                x = _ridge_rows(theta, mask.T, target.T, lam)
            else:
                resid = np.where(mask, theta @ x.T - target, 0.0)
                theta = theta - params.step * (2 * resid @ x + 2 * lam * theta)
                resid = np.where(mask, theta @ x.T - target, 0.0)
                x = x - params.step * (2 * resid.T @ theta + 2 * lam * x)
        err = record(it)
    log.debug("mc_fit stopped after %d iterations, normalized error %.3g", it, err)
    return FactorPair(theta, x, trace)


def mc_classify(factors: FactorPair | np.ndarray, obs: ObservationSets, beta: float) -> np.ndarray:
    """Threshold the completed matrix on unknown cells; known cells pass through."""
    est = factors.estimate() if isinstance(factors, FactorPair) else np.asarray(factors)
    chat = np.where(obs.unknown, est >= beta, obs.omega1)
    return chat.astype(np.int8)


@dataclass
class WindowedObservations:
    obs: ObservationSets  # merged over the window
    current: np.ndarray  # column indices of the current frame's devices
    conflicts: int  # cells with disagreeing gains across frames


def window_stack(frames: list[ObservationSets]) -> WindowedObservations:
    """Merge per-frame observation sets, oldest first, current frame last.

    Columns are keyed by device ID; the current frame's devices come first.
    """
    if not frames:
        raise ConfigError("window needs at least one frame")
    V = frames[-1].dims[0]
    order: list[int] = []
    seen: dict[int, int] = {}
    for obs in [frames[-1], *reversed(frames[:-1])]:
        for d in obs.device_ids.tolist():
            if d not in seen:
                seen[d] = len(order)
                order.append(d)
    n = len(order)
    omega1 = np.zeros((V, n), dtype=bool)
    omega0 = np.zeros((V, n), dtype=bool)
    gains = np.full((V, n), np.nan)
    conflicts = 0
    for obs in frames:
        cols = np.array([seen[d] for d in obs.device_ids.tolist()], dtype=np.int64)
        if len(cols) == 0:
            continue
        prev = gains[:, cols]
        new = obs.gains
        clash = np.isfinite(prev) & np.isfinite(new) & (prev != new)
        conflicts += int(clash.sum())
        omega1[:, cols] |= obs.omega1
        omega0[:, cols] |= obs.omega0
        gains[:, cols] = np.where(np.isfinite(new), new, prev)
    if conflicts:
        warnings.warn(f"{conflicts} cells carry different gains in different frames; keeping the latest")
    current = np.array([seen[d] for d in frames[-1].device_ids.tolist()], dtype=np.int64)
    merged = ObservationSets(omega1, gains, omega0, np.asarray(order, dtype=np.int64))
    return WindowedObservations(merged, current, conflicts)
