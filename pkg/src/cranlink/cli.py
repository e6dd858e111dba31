"""Command-line entry point: ``cranlink <subcommand>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from cranlink import io
from cranlink.config import ExperimentConfig, defaults_text, from_mapping, load_config
from cranlink.errors import ConfigError, MalformedReportError, SolverDivergenceError
from cranlink.evalkit import hypothesis_matrix, model_vs_sim, rates
from cranlink.harness import (
    FrameData,
    build_network,
    calibrate,
    campaign_table,
    evaluate,
    fit_frames,
    network_from_layout,
    output_path,
    roc_table,
    run_experiment,
    simulate,
    summary_row,
)
from cranlink.classify import baseline_classify, mc_classify, observations
from cranlink.rasim import p_star
from cranlink.rng import substream

EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3


def _base_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    overrides = {}
    for opt, key in (("frames", "frames"), ("rho", "rho"), ("lambda_in", "lambda_in"), ("p", "p"),
                     ("seed", "seed"), ("mode", "mode"), ("window", "window"), ("d_thr", "d_thr"),
                     ("lambda_reg", "lambda_reg"), ("rank", "rank"), ("step", "step"),
                     ("max_iters", "max_iters"), ("eps_stop", "eps_stop"), ("solver", "solver")):
        value = getattr(args, opt, None)
        if value is not None:
            overrides[key] = value
    theta = getattr(args, "theta", None)
    if theta is not None:
        overrides["theta"] = list(theta) if isinstance(theta, list) else [theta]
    return from_mapping(overrides, cfg)


def _sim_config(directory: Path) -> ExperimentConfig:
    return load_config(directory / "config.toml")


def _add_mc_flags(p):
    p.add_argument("--lambda-reg", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--eps-stop", type=float)
    p.add_argument("--solver", choices=["als", "gradient"])


def cmd_simulate(args) -> None:
    cfg = _base_config(args)
    theta = cfg.theta[0]
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    net = build_network(cfg) if cfg.mode == "gscm" else None
    first_kept = 0 if args.keep_views is None else max(0, cfg.frames - args.keep_views)
    stats, kept = simulate(cfg, theta, net, cfg.seed, cfg.frames, keep=lambda f: f >= first_kept)
    io.write_csv(campaign_table(stats), out / "campaign.csv")
    (out / "config.toml").write_text(cfg.replace(theta=[theta], output_dir=str(out)).to_text())
    if net is not None:
        io.write_layout(net.layout, out / "layout.csv")
        for res in kept:
            io.write_csv(io.view_frame(res.report), out / f"view_{res.frame}.csv")
        ids = [res.view.detected for res in kept]
        truth = [res.truth_db for res in kept]
        ids = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
        truth = np.concatenate(truth, axis=1) if truth else np.zeros((net.n_sectors, 0))
        io.write_csv(io.gains_frame(truth, ids), out / "gains.csv")
    print(f"lambda_out={stats.lambda_out:.3f} lambda_ra={stats.lambda_ra:.3f} lambda_in={stats.lambda_in:.3f} "
          f"frames={len(stats.detected)} -> {out}")


def _load_frames(directory: Path, cfg: ExperimentConfig):
    layout = io.read_layout(directory / "layout.csv")
    net = network_from_layout(layout, cfg)
    views = [io.read_view(p, net.n_sectors, frame=f) for f, p in io.view_files(directory)]
    if not views:
        raise ConfigError(f"no view_*.csv files in {directory}")
    gains = io.read_gains(directory / "gains.csv")
    return net, views, gains


def _d_thr(args, cfg, net) -> float:
    if args.d_thr is not None and args.d_thr >= 0:
        return args.d_thr
    return calibrate(net, cfg.seed)[0]


def _frames(views, gains, net, cfg, d_thr):
    D = net.rrh_distances()
    out = []
    for view in views:
        if view.n_detected == 0:
            continue
        truth = io.gains_for(gains, view.detected, net.n_sectors)
        out.append(FrameData(view.frame, observations(view, D, d_thr, cfg.S), hypothesis_matrix(truth, cfg.Gamma)))
    return out


def cmd_classify(args) -> None:
    directory = Path(args.sim_dir)
    cfg = _apply(_sim_config(directory), args)
    net, views, gains = _load_frames(directory, cfg)
    d_thr = _d_thr(args, cfg, net)
    frames = _frames(views, gains, net, cfg, d_thr)
    out = output_path(args.out) if args.out else directory
    out.mkdir(parents=True, exist_ok=True)
    trace_rows = []
    if args.method == "mc":
        fits = fit_frames(frames, cfg.mc(), args.window or 1, cfg.seed)
    for k, fd in enumerate(frames):
        if args.method == "baseline":
            chat = baseline_classify(fd.obs, args.alpha, substream(cfg.seed, "classify", fd.frame))
        else:
            obs, est, factors = fits[k]
            chat = mc_classify(est, obs, cfg.Gamma if args.beta is None else args.beta)
            trace_rows += [(fd.frame, *row) for row in factors.trace]
        io.write_csv(io.chat_frame(chat, fd.obs.known, fd.obs.device_ids), out / f"chat_{fd.frame}.csv")
        p_d, p_f = rates(chat, fd.truth)
        print(f"frame {fd.frame}: devices={fd.obs.dims[1]} p_d={p_d:.4f} p_f={p_f:.4f}")
    if args.method == "mc":
        io.write_csv(pd.DataFrame(trace_rows, columns=["frame", "iter", "objective", "normalized_error"]),
                     out / "fit_trace.csv")


def _apply(cfg: ExperimentConfig, args) -> ExperimentConfig:
    overrides = {}
    for key in ("window", "lambda_reg", "rank", "step", "max_iters", "eps_stop", "solver", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return from_mapping(overrides, cfg)


def cmd_roc(args) -> None:
    directory = Path(args.sim_dir)
    cfg = _apply(_sim_config(directory), args)
    net, views, gains = _load_frames(directory, cfg)
    d_thr = _d_thr(args, cfg, net)
    frames = _frames(views, gains, net, cfg, d_thr)
    windows = (1,) if cfg.window == 1 else (1, cfg.window)
    ev = evaluate(frames, cfg, cfg.seed, windows)
    curves = ev.unknown_only if args.unknown_only else ev.curves
    out = output_path(args.out) if args.out else directory
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, curve in curves.items():
        io.write_csv(roc_table(curve), out / f"roc_{name}.csv")
        w = int(name.split("_w")[1]) if "_w" in name else 1
        rows.append(summary_row(name, cfg.theta[0], w, curve))
        print(f"{name}: auc={curve.auc:.5f}")
    io.write_csv(pd.DataFrame(rows), out / "summary.csv")


def cmd_model_vs_sim(args) -> None:
    cfg = _base_config(args)
    thetas = cfg.theta
    if args.p_values:
        grid = list(args.p_values)
    else:
        def grid(theta):
            ps = p_star(cfg.rho, cfg.lambda_in, theta)
            return [ps / 2, ps, min(1.0, 2 * ps)]
    modes = args.modes
    net = build_network(cfg) if "gscm" in modes else None
    rows = model_vs_sim(thetas, grid, cfg.lambda_in, cfg.frames, cfg.seed,
                        source=net.source() if net else None, lambda_ra=args.lambda_ra,
                        modes=modes, Gamma=cfg.Gamma, warmup=cfg.warmup)
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame([{
        "theta": r.theta, "p": r.p, "lambda_out_sim": r.lambda_out_sim,
        "lambda_out_model": r.lambda_out_model, "stderr": r.stderr, "mode": r.mode,
    } for r in rows])
    io.write_csv(df, out / "throughput.csv")
    print(df.to_string(index=False))


def cmd_calibrate(args) -> None:
    cfg = _base_config(args)
    net = network_from_layout(io.read_layout(args.layout), cfg) if args.layout else build_network(cfg)
    d_thr, degenerate = calibrate(net, cfg.seed)
    if degenerate:
        print("warning: no device is strong to two RRHs; d_thr = 0", file=sys.stderr)
    print(f"d_thr={d_thr!r}")
    if args.out:
        out = output_path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.write_csv(pd.DataFrame({"d_thr": [d_thr], "degenerate": [int(degenerate)]}), out / "calibration.csv")


def cmd_run(args) -> None:
    cfg = _base_config(args)
    if args.out:
        cfg = cfg.replace(output_dir=args.out)
    out = run_experiment(cfg)
    print((out / "summary.csv").read_text(), end="")
    print(f"-> {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cranlink", description=__doc__)
    parser.add_argument("--print-defaults", action="store_true", help="print the default configuration and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", help="run an RA campaign and dump per-frame views")
    p.add_argument("--config")
    p.add_argument("--frames", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--lambda-in", type=float)
    p.add_argument("--p", type=float, help="access probability (overrides p*)")
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["gscm", "abstract-q"])
    p.add_argument("--keep-views", type=int, help="dump views of only the last K frames")
    p.add_argument("--out", default="sim")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("classify", help="classify links of simulated frames")
    p.add_argument("sim_dir")
    p.add_argument("--method", choices=["baseline", "mc"], default="mc")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, help="completion threshold in dB (default: Gamma)")
    p.add_argument("--window", type=int)
    p.add_argument("--d-thr", type=float, help="RRH separation for distance zeros (default: calibrate)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    _add_mc_flags(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("roc", help="ROC curves of both classifiers on simulated frames")
    p.add_argument("sim_dir")
    p.add_argument("--window", type=int)
    p.add_argument("--d-thr", type=float)
    p.add_argument("--unknown-only", action="store_true", help="count only cells unknown to the central unit")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    _add_mc_flags(p)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("model-vs-sim", help="simulated vs. rule-of-thumb detections per frame")
    p.add_argument("--config")
    p.add_argument("--theta", type=float, nargs="+")
    p.add_argument("--p-values", type=float, nargs="+")
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-ra", type=int, default=506)
    p.add_argument("--modes", nargs="+", choices=["abstract-q", "gscm"], default=["abstract-q", "gscm"])
    p.add_argument("--out", default="throughput")
    p.set_defaults(func=cmd_model_vs_sim)

    p = sub.add_parser("calibrate-dthr", help="calibrate the RRH separation threshold")
    p.add_argument("--config")
    p.add_argument("--layout", help="layout.csv to calibrate against (default: fresh drop)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="full pipeline: simulate, classify, ROC, summary")
    p.add_argument("--config")
    p.add_argument("--frames", type=int)
    p.add_argument("--theta", type=float, nargs="+")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.print_defaults:
        print(defaults_text(), end="")
        return 0
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        args.func(args)
    except (ConfigError, MalformedReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverDivergenceError as exc:
        print(f"solver diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return 0


if __name__ == "__main__":
    sys.exit(main())
