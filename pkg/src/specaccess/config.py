"""Scenario configuration.

Configs are YAML mappings whose keys mirror the dataclass fields below;
every section is optional and unknown keys are rejected so typos fail
loudly. A minimal example::

    K: 18
    K_prime: 6
    kappa: 6
    horizon: 50000
    lam: 1.0
    estimator:
      mode: concurrent
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any

import yaml

from .channel import ChannelEnvParams, SensingModel
from .occupancy import INIT_CHOICES, DEFAULT_THETA, ThetaVector
from .perseus import SolverConfig, fragment_spectrum

ESTIMATOR_MODES = ("known", "concurrent", "sequential")


class ConfigError(ValueError):
    """Invalid scenario configuration; the message names the offending field."""


@dataclass(frozen=True)
class Geometry:
    lu_tx: tuple = ((-225.0, 200.0, 40.0), (225.0, 200.0, 40.0), (0.0, -300.0, 40.0))
    lu_rx_radius: float = 200.0
    cr_tx: tuple = (0.0, 0.0, 20.0)
    cr_rx_radius: float = 100.0
    speed_mps: float = 1.4
    slot_s: float = 0.003
    readapt_m: float = 1.0  # re-run rate adaptation after moving this far


@dataclass(frozen=True)
class EstimatorConfig:
    mode: str = "concurrent"
    max_iters: int = 100
    tol: float = 1e-3
    update_start: int = 1000  # first re-estimation slot; later ones double
    learning_slots: int | None = None  # sequential mode; default half the horizon
    theta0: float = 0.5


@dataclass(frozen=True)
class MultiAgentConfig:
    n_agents: int = 12
    sensing_per_agent: int = 1
    threshold_db: float = 22.0
    quorum: int | None = None
    stability_rounds: int = 3
    max_rounds: int = 100
    drop_prob: float = 0.0
    cooperative: bool = True
    area_radius: float = 100.0  # agents placed uniformly in this disc around the origin
    rssi_db: tuple | None = None  # explicit n x n pairwise RSSI; overrides placement


@dataclass(frozen=True)
class RocConfig:
    lambdas: tuple = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
    np_samples: int = 300
    np_target_p_fa: float = 0.3
    n_seeds: int = 10  # sweep uses seeds seed, seed+1, ...


@dataclass(frozen=True)
class ScenarioConfig:
    K: int = 18
    K_prime: int = 6
    kappa: int = 6
    J_L: int = 3
    J_C: int = 1
    horizon: int = 50000
    lam: float = 1.0
    seed: int = 0
    init: str = "uniform"
    theta_true: ThetaVector = DEFAULT_THETA
    sensing: SensingModel = SensingModel()
    channel: ChannelEnvParams = ChannelEnvParams()
    geometry: Geometry = Geometry()
    lu_rate: float = 0.9e6
    lu_power: float = 1.0
    cr_power: float = 0.1
    solver: SolverConfig = SolverConfig()
    estimator: EstimatorConfig = EstimatorConfig()
    multi_agent: MultiAgentConfig = MultiAgentConfig()
    roc: RocConfig = RocConfig()

    @property
    def fragments(self):
        return fragment_spectrum(self.K, self.K_prime, self.kappa)

    def with_overrides(self, **changes) -> "ScenarioConfig":
        return validate(dataclasses.replace(self, **changes))


_SECTIONS = {
    "theta_true": ThetaVector,
    "sensing": SensingModel,
    "channel": ChannelEnvParams,
    "geometry": Geometry,
    "solver": SolverConfig,
    "estimator": EstimatorConfig,
    "multi_agent": MultiAgentConfig,
    "roc": RocConfig,
}
_TUPLE_FIELDS = {("geometry", "lu_tx"), ("geometry", "cr_tx"), ("roc", "lambdas"), ("multi_agent", "rssi_db")}


def _tupleize(value):
    if isinstance(value, list):
        return tuple(_tupleize(v) for v in value)
    return value


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(names))}")
    kwargs = {}
    for key, value in data.items():
        if (where, key) in _TUPLE_FIELDS:
            value = _tupleize(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def from_mapping(data: dict[str, Any] | None) -> ScenarioConfig:
    data = dict(data or {})
    top = {f.name for f in dataclasses.fields(ScenarioConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            value = _build(_SECTIONS[key], value, key)
        kwargs[key] = value
    try:
        cfg = ScenarioConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return validate(cfg)


def load(path) -> ScenarioConfig:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return from_mapping(data)


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate(cfg: ScenarioConfig) -> ScenarioConfig:
    for name in ("K", "K_prime", "J_L", "J_C"):
        value = getattr(cfg, name)
        _check(isinstance(value, int) and value > 0, f"{name}: must be a positive integer, got {value!r}")
    _check(isinstance(cfg.kappa, int) and 1 <= cfg.kappa <= cfg.K, f"kappa: must lie in 1..K, got {cfg.kappa!r}")
    _check(isinstance(cfg.horizon, int) and cfg.horizon >= 0, "horizon: must be a nonnegative integer")
    _check(cfg.K_prime <= 12, "K_prime: fragments wider than 12 subcarriers are not supported")
    _check(cfg.lam >= 0, "lam: penalty must be nonnegative")
    _check(cfg.init in INIT_CHOICES, f"init: must be one of {INIT_CHOICES}")
    _check(isinstance(cfg.seed, int) and cfg.seed >= 0, "seed: must be a nonnegative integer")
    try:
        fragments = cfg.fragments
    except ValueError as exc:
        raise ConfigError(f"K/K_prime/kappa: {exc}") from exc
    _check(cfg.J_L <= len(fragments) or cfg.J_L == 1,
           "J_L: each licensed user owns one fragment, so J_L may not exceed K/K_prime")
    _check(len(cfg.geometry.lu_tx) >= cfg.J_L, "geometry.lu_tx: need one position per licensed user")
    for p in (*cfg.geometry.lu_tx, cfg.geometry.cr_tx):
        _check(len(p) == 3, "geometry: positions are [x, y, z] triples")
    _check(cfg.geometry.lu_rx_radius > 0 and cfg.geometry.cr_rx_radius > 0, "geometry: radii must be positive")
    _check(cfg.geometry.speed_mps >= 0 and cfg.geometry.slot_s > 0, "geometry: speed >= 0 and slot_s > 0")
    _check(cfg.lu_rate > 0 and cfg.lu_power > 0 and cfg.cr_power > 0, "lu_rate/lu_power/cr_power: must be positive")
    try:
        cfg.solver.radius(cfg.K_prime)
    except ValueError as exc:
        raise ConfigError(f"solver.delta: {exc}") from exc
    est = cfg.estimator
    _check(est.mode in ESTIMATOR_MODES, f"estimator.mode: must be one of {ESTIMATOR_MODES}")
    _check(est.max_iters >= 1 and est.tol > 0, "estimator: max_iters >= 1 and tol > 0")
    _check(est.update_start >= 2, "estimator.update_start: must be >= 2")
    _check(0.0 < est.theta0 < 1.0, "estimator.theta0: must lie in (0, 1)")
    if est.learning_slots is not None:
        _check(0 <= est.learning_slots <= cfg.horizon, "estimator.learning_slots: must lie in 0..horizon")
    ma = cfg.multi_agent
    _check(ma.n_agents >= 1 and ma.sensing_per_agent >= 1, "multi_agent: n_agents and sensing_per_agent >= 1")
    _check(ma.stability_rounds >= 1 and ma.max_rounds >= 1, "multi_agent: stability_rounds and max_rounds >= 1")
    _check(ma.quorum is None or ma.quorum >= 1, "multi_agent.quorum: must be >= 1")
    _check(0.0 <= ma.drop_prob < 1.0, "multi_agent.drop_prob: must lie in [0, 1)")
    if ma.rssi_db is not None:
        _check(len(ma.rssi_db) == ma.n_agents and all(len(r) == ma.n_agents for r in ma.rssi_db),
               "multi_agent.rssi_db: must be an n_agents x n_agents matrix")
    _check(len(cfg.roc.lambdas) >= 1 and all(v >= 0 for v in cfg.roc.lambdas), "roc.lambdas: nonempty, nonnegative")
    _check(0.0 < cfg.roc.np_target_p_fa < 1.0, "roc.np_target_p_fa: must lie in (0, 1)")
    _check(cfg.roc.np_samples >= 1, "roc.np_samples: must be >= 1")
    _check(cfg.roc.n_seeds >= 1, "roc.n_seeds: must be >= 1")
    return cfg


def to_mapping(cfg: ScenarioConfig) -> dict:
    """Plain nested dict suitable for ``yaml.safe_dump``."""
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v
    return plain(cfg)
