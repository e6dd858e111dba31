"""Experiment orchestration: network drop, RA campaigns, classification, ROC output."""
from __future__ import annotations

import logging
import os
import platform
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

import cranlink
from cranlink import io
from cranlink.channel import GainModel, NetworkLayout, SectorGainMatrix, calibrate_d_thr, drop_entities
from cranlink.classify import (
    McParams,
    ObservationSets,
    baseline_classify,
    mc_classify,
    mc_fit,
    observations,
    window_stack,
)
from cranlink.config import ExperimentConfig
from cranlink.evalkit import RocCurve, average_rates, beta_grid, hypothesis_matrix, rates, roc_sweep
from cranlink.rasim import CampaignStats, DeviceSource, FrameResult, run_campaign
from cranlink.rng import derive_seed, substream

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "CRANLINK_OUTPUT_ROOT"


@dataclass
class Network:
    layout: NetworkLayout  # RRHs, scatterers, blockers; devices are the calibration drop
    gain_model: GainModel
    config: ExperimentConfig

    @property
    def n_sectors(self) -> int:
        return self.gain_model.n_sectors

    def rrh_distances(self) -> np.ndarray:
        return self.layout.rrh_distances()

    def source(self) -> DeviceSource:
        return DeviceSource(self.gain_model, self.layout.area_side)


def build_network(cfg: ExperimentConfig, seed: int | None = None) -> Network:
    seed = cfg.seed if seed is None else seed
    params = cfg.channel()
    layout = drop_entities(params, cfg.geometry(), substream(seed, "layout"))
    return Network(layout, GainModel(layout, params), cfg)


def network_from_layout(layout: NetworkLayout, cfg: ExperimentConfig) -> Network:
    return Network(layout, GainModel(layout, cfg.channel()), cfg)


def calibrate(net: Network, seed: int) -> tuple[float, bool]:
    """Calibrate d_thr on a fresh device drop over the same RRHs and scatterers."""
    cfg = net.config
    pos = substream(seed, "calibration").uniform(0.0, net.layout.area_side, size=(cfg.calibration_devices, 2))
    G = SectorGainMatrix(net.gain_model.db(pos), cfg.linear_floor)
    return calibrate_d_thr(G, net.layout.with_devices(pos), cfg.Gamma, cfg.S)


def resolve_d_thr(net: Network, seed: int) -> float:
    d_thr = net.config.d_thr
    return calibrate(net, seed)[0] if d_thr < 0 else d_thr


def simulate(cfg: ExperimentConfig, theta: float, net: Network | None, seed: int, n_frames: int, keep=None):
    """Run one campaign; returns its statistics and the kept frame results.

    ``keep(frame_index)`` decides which frames retain their RA report and view.
    """
    kept: list[FrameResult] = []

    def collect(res: FrameResult):
        if keep is None or keep(res.frame):
            kept.append(res)

    if cfg.mode == "abstract-q":
        q = cfg.access_probability(theta)
        stats = run_campaign(cfg.ra(theta), DeviceSource(None, cfg.area_side), n_frames, seed,
                             warmup=cfg.warmup, abstract_q=q, on_frame=collect)
    else:
        stats = run_campaign(cfg.ra(theta), net.source(), n_frames, seed, warmup=cfg.warmup, on_frame=collect)
    return stats, kept


@dataclass
class FrameData:
    frame: int
    obs: ObservationSets
    truth: np.ndarray  # (V, n) hypothesis matrix of the detected devices


@dataclass
class Evaluation:
    curves: dict[str, RocCurve]
    unknown_only: dict[str, RocCurve]
    traces: dict[str, list] = field(default_factory=dict)  # method -> [(frame, iter, obj, err)]
    misinferred: int = 0  # true-strong cells inside omega0


def frame_data(results: list[FrameResult], rrh_distances: np.ndarray, d_thr: float, cfg: ExperimentConfig) -> list[FrameData]:
    out = []
    for res in results:
        if res.view is None or res.view.n_detected == 0:
            continue
        obs = observations(res.view, rrh_distances, d_thr, cfg.S)
        out.append(FrameData(res.frame, obs, hypothesis_matrix(res.truth_db, cfg.Gamma)))
    return out


def fit_frames(frames: list[FrameData], params: McParams, window: int, seed: int):
    """One completion per frame over the trailing ``window`` frames.

    Returns per-frame ``(obs restricted to current devices, estimate, FactorPair)``.
    """
    fits = []
    for k, fd in enumerate(frames):
        stack = [f.obs for f in frames[max(0, k - window + 1):k + 1]]
        merged = window_stack(stack)
        factors = mc_fit(merged.obs, params, substream(seed, "mc-init", window, fd.frame))
        est = factors.estimate()[:, merged.current]
        fits.append((merged.obs.select(merged.current), est, factors))
    return fits


def _sweep(frames, classify, controls, unknown_only):
    def point(c):
        per = []
        for k, fd in enumerate(frames):
            chat = classify(k, c)
            mask = fd.obs.unknown if unknown_only else None
            per.append(rates(chat, fd.truth, mask))
        return average_rates(per)

    return roc_sweep(point, controls)


def evaluate(frames: list[FrameData], cfg: ExperimentConfig, seed: int, windows=(1,)) -> Evaluation:
    alphas = np.linspace(0.0, 1.0, cfg.n_alpha)
    curves, unknown, traces = {}, {}, {}

    def base(k, a):
        ai = int(np.argmin(np.abs(alphas - a)))
        return baseline_classify(frames[k].obs, a, substream(seed, "baseline", frames[k].frame, ai))

    curves["baseline"] = _sweep(frames, base, alphas, False)
    unknown["baseline"] = _sweep(frames, base, alphas, True)

    params = cfg.mc()
    for w in windows:
        name = "mc" if w == 1 else f"mc_w{w}"
        fits = fit_frames(frames, params, w, seed)
        betas = beta_grid([est[o.unknown] if o.unknown.any() else est for o, est, _ in fits], cfg.n_beta)

        def mc(k, b, fits=fits):
            o, est, _ = fits[k]
            return mc_classify(est, o, b)

        curves[name] = _sweep(frames, mc, betas, False)
        unknown[name] = _sweep(frames, mc, betas, True)
        traces[name] = [(fd.frame, *row) for fd, (_, _, fp) in zip(frames, fits) for row in fp.trace]
    misinferred = int(sum((fd.obs.omega0 & (fd.truth == 1)).sum() for fd in frames))
    return Evaluation(curves, unknown, traces, misinferred)


def summary_row(method: str, theta: float, window: int, curve: RocCurve) -> dict:
    return {"method": method, "theta": theta, "window": window, "auc": curve.auc, "p_d_at_pf_0.05": curve.p_d_at(0.05)}


def roc_table(curve: RocCurve) -> pd.DataFrame:
    control, pf, pd_ = curve.as_arrays()
    return pd.DataFrame({"control": control, "p_f": pf, "p_d": pd_})


def campaign_table(stats: CampaignStats) -> pd.DataFrame:
    return pd.DataFrame({
        "frame": np.arange(len(stats.detected)),
        "arrivals": stats.arrivals,
        "active": stats.active,
        "detected": stats.detected,
        "queue": stats.queue,
    })


def output_path(path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def manifest_text(cfg: ExperimentConfig, extra: dict | None = None) -> str:
    lines = [
        f"config_sha256 = {cfg.digest()}",
        f"seed = {cfg.seed}",
        f"cranlink = {cranlink.__version__}",
        f"numpy = {np.__version__}",
        f"pandas = {pd.__version__}",
        f"python = {platform.python_version()}",
    ]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig) -> Path:
    """Full pipeline for every theta; writes CSVs, ``config.toml`` and ``manifest.txt``.

    Output is assembled in a scratch directory and moved into place only on
    success.
    """
    cfg.validate()
    out = output_path(cfg.output_dir)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=out.parent))
    try:
        _run_into(cfg, tmp)
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out


def _run_into(cfg: ExperimentConfig, out: Path) -> None:
    net = build_network(cfg)
    d_thr, degenerate = calibrate(net, cfg.seed) if cfg.d_thr < 0 else (cfg.d_thr, False)
    io.write_layout(net.layout, out / "layout.csv")
    io.write_csv(pd.DataFrame({"d_thr": [d_thr], "degenerate": [int(degenerate)]}), out / "calibration.csv")
    D = net.rrh_distances()
    windows = (1,) if cfg.window == 1 else (1, cfg.window)
    summary = []
    for ti, theta in enumerate(cfg.theta):
        cell = derive_seed(cfg.seed, "theta", ti)
        sub = out / f"theta_{theta:g}"
        sub.mkdir()
        run_cfg = cfg.replace(mode="gscm")
        stats, kept = simulate(run_cfg, theta, net, cell, cfg.frames)
        io.write_csv(campaign_table(stats), sub / "campaign.csv")
        frames = frame_data(kept, D, d_thr, cfg)
        ev = evaluate(frames, cfg, cell, windows)
        for name, curve in ev.curves.items():
            io.write_csv(roc_table(curve), sub / f"roc_{name}.csv")
            w = int(name.split("_w")[1]) if "_w" in name else 1
            summary.append(summary_row(name, theta, w, curve))
        trace = [(name, *row) for name, rows in ev.traces.items() for row in rows]
        io.write_csv(pd.DataFrame(trace, columns=["method", "frame", "iter", "objective", "normalized_error"]),
                     sub / "fit_trace.csv")
    io.write_csv(pd.DataFrame(summary), out / "summary.csv")
    (out / "config.toml").write_text(cfg.to_text())
    (out / "manifest.txt").write_text(manifest_text(cfg, {"d_thr": repr(d_thr)}))
