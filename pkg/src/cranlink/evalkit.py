"""Detection / false-alarm estimators, ROC curves and throughput comparison."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from cranlink.errors import ConfigError
from cranlink.rasim import DeviceSource, RAConfig, model_lambda_out, run_campaign, slots_for
from cranlink.rng import derive_seed

log = logging.getLogger(__name__)


def hypothesis_matrix(G_db: np.ndarray, Gamma: float) -> np.ndarray:
    return (np.asarray(G_db) >= Gamma).astype(np.int8)


def rates(chat: np.ndarray, c: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, float]:
    """``(p_d, p_f)`` of one frame; NaN where the denominator is empty.

    ``mask`` restricts the counts to a subset of cells (all cells by default).
    """
    chat = np.asarray(chat).astype(bool)
    c = np.asarray(c).astype(bool)
    if chat.shape != c.shape:
        raise ConfigError(f"shape mismatch {chat.shape} vs {c.shape}")
    if mask is None:
        mask = np.ones(c.shape, dtype=bool)
    ones = c & mask
    zeros = ~c & mask
    n1, n0 = int(ones.sum()), int(zeros.sum())
    p_d = float((chat & ones).sum() / n1) if n1 else float("nan")
    p_f = float((chat & zeros).sum() / n0) if n0 else float("nan")
    return p_d, p_f


def average_rates(per_frame: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Frame-averaged rates, skipping frames whose denominator was empty."""
    arr = np.asarray(per_frame, dtype=float).reshape(-1, 2)
    out = []
    for col, name in ((0, "strong"), (1, "weak")):
        vals = arr[:, col]
        ok = np.isfinite(vals)
        if not ok.all():
            warnings.warn(f"{(~ok).sum()} frame(s) without true-{name} links excluded from the average")
        out.append(float(vals[ok].mean()) if ok.any() else float("nan"))
    return out[0], out[1]


@dataclass
class RocPoint:
    p_f: float
    p_d: float
    control: float


@dataclass
class RocCurve:
    points: list[RocPoint]
    auc: float

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (
            np.array([p.control for p in self.points]),
            np.array([p.p_f for p in self.points]),
            np.array([p.p_d for p in self.points]),
        )

    def p_d_at(self, p_f: float) -> float:
        """Detection rate at a false-alarm level, linear in between curve points."""
        _, pf, pd = self.as_arrays()
        if p_f >= pf[-1]:
            return float(pd[-1])
        pf = np.concatenate([[0.0], pf]) if pf[0] > 0 else pf
        pd = np.concatenate([[pd[0]], pd]) if len(pd) < len(pf) else pd
        return float(np.interp(p_f, pf, pd))


def sort_points(points: Sequence[RocPoint]) -> list[RocPoint]:
    return sorted(points, key=lambda p: (p.p_f, p.p_d))


def auc(points: Sequence[RocPoint]) -> float:
    """Trapezoid area under the sorted points.

    The curve starts at ``(0, p_d)`` of the lowest point and ends at the
    highest-false-alarm point; nothing is extrapolated beyond it.
    """
    pts = sort_points(points)
    pf = np.array([p.p_f for p in pts])
    pd = np.array([p.p_d for p in pts])
    if pf[0] > 0:
        pf = np.concatenate([[0.0], pf])
        pd = np.concatenate([[pd[0]], pd])
    return float(np.sum(np.diff(pf) * (pd[1:] + pd[:-1]) / 2.0))


def roc_sweep(classifier: Callable[[float], tuple[float, float]], controls: Sequence[float]) -> RocCurve:
    """Evaluate ``classifier(control) -> (p_d, p_f)`` over ``controls``."""
    if len(controls) < 2:
        raise ConfigError("an ROC sweep needs at least two control values")
    pts = []
    for c in controls:
        p_d, p_f = classifier(float(c))
        pts.append(RocPoint(p_f, p_d, float(c)))
    pts = [p for p in pts if np.isfinite(p.p_f) and np.isfinite(p.p_d)]
    pts = sort_points(pts)
    return RocCurve(pts, auc(pts))


def beta_grid(estimates: Sequence[np.ndarray], n: int = 101) -> np.ndarray:
    """Thresholds spanning ``[min, max]`` of the completed matrices.

    Evenly spaced values are merged with quantiles of the pooled estimates so
    the dense middle of the distribution is resolved.
    """
    pooled = np.concatenate([np.ravel(e) for e in estimates])
    lo, hi = float(pooled.min()), float(pooled.max())
    grid = np.concatenate([np.linspace(lo, hi, n), np.quantile(pooled, np.linspace(0.0, 1.0, n))])
    return np.unique(np.concatenate([grid, [np.nextafter(hi, np.inf)]]))


@dataclass
class ThroughputRow:
    mode: str
    theta: float
    p: float
    lambda_out_sim: float
    lambda_out_model: float
    stderr: float
    lambda_ra_sim: float

    def within(self, n_se: float = 3.0) -> bool:
        return abs(self.lambda_out_sim - self.lambda_out_model) <= n_se * self.stderr


def model_vs_sim(
    thetas: Sequence[float],
    p_grid,
    lambda_in: float,
    n_frames: int,
    seed: int,
    source=None,
    lambda_ra: int | None = 506,
    modes: Sequence[str] = ("abstract-q", "gscm"),
    Gamma: float = -18.0,
    warmup: int = 20,
) -> list[ThroughputRow]:
    """Simulated detections per frame against the rule-of-thumb model.

    ``p_grid`` is a list of access probabilities or a callable ``theta -> list``.
    The model is evaluated with ``q = p`` and the simulated mean active-set size.
    """
    if not len(thetas):
        raise ConfigError("model_vs_sim needs a nonempty theta grid")
    rows = []
    for mode in modes:
        if mode == "gscm" and source is None:
            raise ConfigError("gscm mode needs a device source")
        src = source if mode == "gscm" else DeviceSource(None, 1.0)
        for ti, theta in enumerate(thetas):
            ps = p_grid(theta) if callable(p_grid) else p_grid
            if not len(ps):
                raise ConfigError("model_vs_sim needs a nonempty p grid")
            T = slots_for(theta, lambda_in)
            for pi, p in enumerate(ps):
                cfg = RAConfig(T=T, p=float(p), lambda_in=lambda_in, Gamma=Gamma)
                cell = derive_seed(seed, f"throughput/{mode}", ti, pi)
                q = float(p) if mode == "abstract-q" else None
                st = run_campaign(cfg, src, n_frames, cell, warmup=warmup, abstract_q=q, lambda_ra=lambda_ra)
                rows.append(ThroughputRow(
                    mode, float(theta), float(p), st.lambda_out,
                    model_lambda_out(float(p), T, st.lambda_ra), st.lambda_out_stderr, st.lambda_ra,
                ))
    return rows
