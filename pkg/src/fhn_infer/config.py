"""Experiment configuration: an INI file with one section per concern.

Every key is optional; missing keys fall back to the defaults below, which
mirror the settings used throughout the reconstruction-map experiments.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .fhn import DEFAULT_ATOL, DEFAULT_RTOL, SPIKE_THRESHOLD, SimConstants
from .stochastic import NoisePrior, PriorSpec


@dataclass(frozen=True)
class SeedConfig:
    train: int = 1
    valid: int = 2
    test: int = 3
    noise_pool: int = 7
    init: int = 1
    shuffle: int = 1
    folds: int = 11


@dataclass(frozen=True)
class NoiseConfig:
    mean_sigma: float = 0.07
    sd_sigma: float = 0.01
    mean_rho: float = 0.8
    sd_rho: float = 0.05
    pool_size: int = 100

    def prior(self) -> NoisePrior:
        return NoisePrior(self.mean_sigma, self.sd_sigma, self.mean_rho, self.sd_rho)


@dataclass(frozen=True)
class SimConfig:
    gamma: float = 3.0
    zeta: float = -0.4
    u0: float = 0.0
    v0: float = 0.0
    t_end: float = 200.0
    dt_out: float = 0.2
    rtol: float = DEFAULT_RTOL
    atol: float = DEFAULT_ATOL
    spike_threshold: float = SPIKE_THRESHOLD

    def constants(self) -> SimConstants:
        return SimConstants(self.gamma, self.zeta, self.u0, self.v0, self.t_end, self.dt_out)


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 1000
    n_valid: int = 2000
    n_test: int = 2000
    feature_kind: str = "time"


@dataclass(frozen=True)
class NetworkConfig:
    family: str = "cnn"
    dense_layers: int = 4
    dense_units: int = 32
    cnn_filters: int = 8
    cnn_multipliers: tuple = (1, 2, 4)
    head_units: tuple = (32, 32)
    kernel: int = 3
    stride: int = 2


@dataclass(frozen=True)
class TrainSection:
    epochs_clean: int = 200
    epochs_noisy: int = 50
    batch_size: int = 32
    lr: float = 0.002
    # one mean/sd per feature block instead of per coordinate
    pooled_scaling: bool = False


@dataclass(frozen=True)
class StudyConfig:
    sweep_dense_layers: tuple = (2, 4, 8, 12, 16)
    sweep_dense_units: tuple = (4, 8, 16, 32, 64, 128)
    sweep_cnn_blocks: tuple = (2, 3, 4)
    sweep_cnn_filters: tuple = (2, 4, 8, 16, 32)
    n_values: tuple = (500, 1000, 4000, 8000)
    windows: tuple = ((30, 530), (146, 646), (174, 674), (362, 862), (370, 870))
    window_pooled_scaling: bool = False
    joint_feature_kinds: tuple = ("time", "fourier", "time_and_fourier")
    percentiles: tuple = (10, 25, 50, 75, 90)
    cv_k: int = 6
    cv_seeds: tuple = tuple(range(1, 11))
    grid_resolution: int = 60
    loss_resolution: int = 200
    loss_theta0: float = 0.7
    loss_theta1: float = 0.8
    loss_noise_sigma: float = 0.07
    loss_noise_rho: float = 0.8
    # the landscape only needs to resolve differences far above the noise scale
    loss_rtol: float = 1e-7
    loss_atol: float = 1e-10


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: SeedConfig = field(default_factory=SeedConfig)
    prior: PriorSpec = field(default_factory=PriorSpec)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainSection = field(default_factory=TrainSection)
    study: StudyConfig = field(default_factory=StudyConfig)
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything except the output location."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def override(self, section: str, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **{section: dataclasses.replace(getattr(self, section), **kw)})

    def to_ini(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if not dataclasses.is_dataclass(value):
                continue
            lines.append(f"[{f.name}]")
            for sf in fields(value):
                lines.append(f"{sf.name} = {_format(getattr(value, sf.name))}")
            lines.append("")
        lines += ["[output]", f"dir = {self.output_dir}", ""]
        return "\n".join(lines)


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return "; ".join(",".join(str(x) for x in item) for item in v)
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        if default and isinstance(default[0], tuple):
            return tuple(tuple(int(x) for x in item.split(",")) for item in text.split(";") if item.strip())
        if ".." in text:
            lo, hi = text.split("..")
            return tuple(range(int(lo), int(hi) + 1))
        items = [x.strip() for x in text.split(",") if x.strip()]
        kind = type(default[0]) if default else str
        return tuple(kind(x) for x in items)
    return text


def load_config(path=None, text: str | None = None) -> ExperimentConfig:
    """Read an INI file (or string); unknown sections or keys are errors."""
    cfg = ExperimentConfig()
    if path is None and text is None:
        return cfg
    parser = configparser.ConfigParser()
    try:
        if text is not None:
            parser.read_string(text)
        else:
            with open(path) as fh:
                parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    for section in parser.sections():
        if section == "output":
            for key, val in parser.items(section):
                if key != "dir":
                    raise ConfigError(f"unknown key [output] {key}")
                cfg = dataclasses.replace(cfg, output_dir=val)
            continue
        if section not in {f.name for f in fields(cfg)}:
            raise ConfigError(f"unknown section [{section}]")
        current = getattr(cfg, section)
        known = {f.name for f in fields(current)}
        updates = {}
        for key, val in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key [{section}] {key}")
            try:
                updates[key] = _parse(val, getattr(current, key))
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
        try:
            cfg = cfg.override(section, **updates)
        except ValueError as exc:
            raise ConfigError(f"[{section}]: {exc}") from exc
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    try:
        cfg.sim.constants()
    except ValueError as exc:
        raise ConfigError(f"[sim]: {exc}") from exc
    if cfg.network.family not in ("dense", "cnn"):
        raise ConfigError(f"[network] family must be dense or cnn, got {cfg.network.family!r}")
    if min(cfg.data.n_train, cfg.data.n_valid, cfg.data.n_test) < 1:
        raise ConfigError("[data] sample counts must be positive")
    if cfg.train.batch_size < 1 or cfg.train.lr <= 0:
        raise ConfigError("[train] batch_size and lr must be positive")
    if cfg.noise.pool_size < 1:
        raise ConfigError("[noise] pool_size must be positive")
