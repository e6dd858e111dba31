"""CSV readers and writers for layouts, gains, RA views and classifier output."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd

from cranlink.channel import NetworkLayout
from cranlink.errors import ConfigError, MalformedReportError
from cranlink.rasim import COLLISION, SILENCE, CentralView, RAReport, merge_reports

_KIND = {SILENCE: "silence", COLLISION: "collision"}


def write_csv(df: pd.DataFrame, path) -> None:
    df.to_csv(path, index=False, lineterminator="\n")


def layout_frame(layout: NetworkLayout) -> pd.DataFrame:
    parts = []

    def add(entity, pts, extra):
        if len(pts):
            parts.append(pd.DataFrame({
                "entity": entity, "id": np.arange(len(pts)), "x": pts[:, 0], "y": pts[:, 1], "extra": extra,
            }))

    add("rrh", layout.rrh_positions, layout.sector_orientations)
    add("device", layout.device_positions, np.nan)
    add("scatterer", layout.scatterer_positions, np.nan)
    add("blocker", layout.blocker_centers, layout.blocker_radii)
    parts.append(pd.DataFrame({"entity": ["area"], "id": [0], "x": [layout.area_side], "y": [layout.area_side], "extra": [np.nan]}))
    return pd.concat(parts, ignore_index=True)


def write_layout(layout: NetworkLayout, path, device_ids=None, device_extra=None) -> None:
    df = layout_frame(layout)
    if device_ids is not None:
        dev = df["entity"] == "device"
        df.loc[dev, "id"] = np.asarray(device_ids)
        if device_extra is not None:
            df.loc[dev, "extra"] = np.asarray(device_extra, dtype=float)
    write_csv(df, path)


def read_layout(path) -> NetworkLayout:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"layout file not found: {path}")
    df = pd.read_csv(path, float_precision="round_trip")

    def pts(entity):
        sub = df[df["entity"] == entity]
        return sub[["x", "y"]].to_numpy(dtype=float).reshape(-1, 2), sub["extra"].to_numpy(dtype=float)

    rrh, orient = pts("rrh")
    dev, _ = pts("device")
    scat, _ = pts("scatterer")
    blk, radii = pts("blocker")
    area = df.loc[df["entity"] == "area", "x"]
    if rrh.size == 0 or area.empty:
        raise ConfigError(f"{path}: layout needs rrh rows and an area row")
    return NetworkLayout(rrh, orient, dev, scat, blk, radii, float(area.iloc[0]))


def gains_frame(truth_db: np.ndarray, device_ids: np.ndarray) -> pd.DataFrame:
    V, n = truth_db.shape
    return pd.DataFrame({
        "sector_id": np.repeat(np.arange(V), n),
        "device_id": np.tile(np.asarray(device_ids), V),
        "gain_db": truth_db.ravel(),
    })


def read_gains(path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"gains file not found: {path}")
    return pd.read_csv(path, float_precision="round_trip")


def gains_for(gains: pd.DataFrame, device_ids: np.ndarray, n_sectors: int) -> np.ndarray:
    """Ground-truth columns (V, n) for ``device_ids`` from a long-format gains table."""
    wide = gains.pivot(index="sector_id", columns="device_id", values="gain_db")
    missing = set(np.asarray(device_ids).tolist()) - set(wide.columns.tolist())
    if missing:
        raise ConfigError(f"gains.csv lacks devices {sorted(missing)[:5]}")
    return wide.reindex(index=np.arange(n_sectors), columns=device_ids).to_numpy(dtype=float)


def view_frame(report: RAReport) -> pd.DataFrame:
    out = report.outcome
    T, V = out.shape
    kind = np.where(out == SILENCE, "silence", np.where(out == COLLISION, "collision", "detection"))
    device = pd.array(np.where(out >= 0, out, 0).ravel(), dtype="Int64")
    device[(out < 0).ravel()] = pd.NA
    return pd.DataFrame({
        "slot": np.repeat(np.arange(T), V),
        "sector": np.tile(np.arange(V), T),
        "outcome": kind.ravel(),
        "device": device,
        "gain_db": report.gain_db.ravel(),
    })


def read_view(path, n_sectors: int | None = None, frame: int = 0) -> CentralView:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"view file not found: {path}")
    df = pd.read_csv(path, dtype={"device": "Int64"}, float_precision="round_trip")
    if df.empty:
        raise MalformedReportError(f"{path}: empty report")
    T = int(df["slot"].max()) + 1
    V = n_sectors if n_sectors is not None else int(df["sector"].max()) + 1
    device = df["device"].astype("object").where(df["device"].notna(), None)
    gain = df["gain_db"].astype(float)
    records = zip(df["slot"], df["sector"], df["outcome"], device, gain)
    return merge_reports(RAReport.from_records(records, T, V), frame=frame)


def view_files(directory) -> list[tuple[int, Path]]:
    out = []
    for p in Path(directory).glob("view_*.csv"):
        try:
            out.append((int(p.stem.split("_", 1)[1]), p))
        except ValueError:
            continue
    return sorted(out)


def chat_frame(chat: np.ndarray, known: np.ndarray, device_ids: np.ndarray) -> pd.DataFrame:
    V, n = chat.shape
    return pd.DataFrame({
        "sector": np.repeat(np.arange(V), n),
        "device": np.tile(np.asarray(device_ids), V),
        "predicted": chat.ravel().astype(int),
        "known_flag": known.ravel().astype(int),
    })
