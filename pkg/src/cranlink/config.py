"""Flat ``key = value`` experiment configuration (TOML syntax, no tables)."""
from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from cranlink.channel import ChannelParams, GeometryConfig
from cranlink.classify import McParams
from cranlink.errors import ConfigError
from cranlink.rasim import RAConfig, p_star, slots_for


@dataclass
class ExperimentConfig:
    # channel
    M: int = 64
    S: int = 4
    d_ant_over_lambda: float = 0.5
    eps_bp: float = 10.0
    alpha_pl: float = 3.5
    a_nlos: float = 0.3
    gamma_path: float = 1e-6
    n_scatterers: int = 500
    n_blockers: int = 200
    blocker_radius: float = 2.0
    linear_floor: float = 1e-12
    # geometry
    n_rrh: int = 100
    area_side: float = 316.0
    ppp: bool = False
    calibration_devices: int = 500
    # random access
    lambda_in: float = 500.0
    rho: float = 0.99
    Gamma: float = -18.0
    theta: list = field(default_factory=lambda: [0.2, 0.5, 1.0])
    p: float = -1.0  # negative: use p*(theta)
    mode: str = "gscm"  # or "abstract-q"
    warmup: int = 20
    # classification
    d_thr: float = -1.0  # negative: calibrate on a separate device drop
    window: int = 2
    n_alpha: int = 11
    n_beta: int = 101
    lambda_reg: float = 20.0
    rank: int = 200
    step: float = 5e-5
    max_iters: int = 1000
    eps_stop: float = 1e-2
    solver: str = "als"
    # run
    frames: int = 5
    seed: int = 0
    output_dir: str = "out"

    def validate(self) -> None:
        self.channel().validate()
        self.mc().validate()
        if self.mode not in ("gscm", "abstract-q"):
            raise ConfigError(f"mode: expected 'gscm' or 'abstract-q', got {self.mode!r}")
        if not self.theta:
            raise ConfigError("theta: need at least one value")
        for t in self.theta:
            if t * self.lambda_in < 1:
                raise ConfigError(f"theta: {t} gives fewer than one pilot slot")
        if self.frames < 1:
            raise ConfigError("frames: must be >= 1")
        if self.window < 1:
            raise ConfigError("window: must be >= 1")
        if self.n_alpha < 2 or self.n_beta < 2:
            raise ConfigError("n_alpha/n_beta: need at least two control values")
        if self.p > 1:
            raise ConfigError(f"p: must be <= 1, got {self.p}")
        if self.seed < 0:
            raise ConfigError("seed: must be nonnegative")
        RAConfig(T=1, p=0.0, lambda_in=self.lambda_in, Gamma=self.Gamma, rho=self.rho).validate()

    def channel(self) -> ChannelParams:
        names = {f.name for f in fields(ChannelParams)}
        return ChannelParams(**{k: getattr(self, k) for k in names})

    def geometry(self, n_devices: int | None = None) -> GeometryConfig:
        return GeometryConfig(self.n_rrh, n_devices or self.calibration_devices, self.area_side, self.ppp)

    def mc(self) -> McParams:
        return McParams(
            lambda_reg=self.lambda_reg, r=self.rank, step=self.step, max_iters=self.max_iters,
            eps_stop=self.eps_stop, gamma_minus=self.Gamma, solver=self.solver,
        )

    def access_probability(self, theta: float) -> float:
        return self.p if self.p >= 0 else p_star(self.rho, self.lambda_in, theta)

    def ra(self, theta: float) -> RAConfig:
        return RAConfig(slots_for(theta, self.lambda_in), self.access_probability(theta), self.lambda_in, self.Gamma, self.rho)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """Hash of every setting that influences results (the output location does not)."""
        return hashlib.sha256(self.replace(output_dir="").to_text().encode()).hexdigest()

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, list):
        return "[" + ", ".join(_format(v) for v in value) + "]"
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def _coerce(name: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        items = value if isinstance(value, list) else [value]
        out = []
        for v in items:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{name}: expected a number or list of numbers, got {value!r}")
            out.append(float(v))
        return out
    raise ConfigError(f"{name}: unsupported option type")


def from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    defaults = {f.name: getattr(base, f.name) for f in fields(base)}
    changes = {}
    for key, value in values.items():
        if key not in defaults:
            raise ConfigError(f"{key}: unknown configuration key")
        if isinstance(value, dict):
            raise ConfigError(f"{key}: nested tables are not supported")
        changes[key] = _coerce(key, value, defaults[key])
    cfg = dataclasses.replace(base, **changes)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_mapping(data)


def defaults_text() -> str:
    return ExperimentConfig().to_text()
