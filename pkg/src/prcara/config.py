"""Run configuration: a single JSON document validated up front.

The defaults reproduce the reference setup: 300-byte broadcast awareness
messages every 100 ms for ordinary vehicles, 500-byte unicast platoon
messages every 20 ms, MCS 3, a 20 MHz pool of 5 subchannels, Winner+ B1
pathloss at 5.9 GHz, 3 dBi antenna gains, 9 dB noise figure, densities 40 to
400 vehicles/km and 100 Monte Carlo seeds. Unknown keys are rejected so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .channel import ChannelParams, FastFading, LinkBudget, PowerLaw, WinnerB1Los
from .scenario import Scenario, TrafficMode
from .schedulers import SchedulerKind


class ConfigError(ValueError):
    """Configuration file or value is invalid."""


@dataclass(frozen=True)
class DecodeThresholds:
    """Minimum SINR for transport-block and control (SCI) decoding.

    The control word uses a more robust modulation, so its threshold sits
    below the transport block's; by default 3 dB below.
    """

    gamma0_db: float = 2.8
    gamma_sci_db: float | None = None
    per_payload_db: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.gamma_sci_db is None:
            object.__setattr__(self, "gamma_sci_db", self.gamma0_db - 3.0)
        if self.gamma_sci_db > self.gamma0_db:
            raise ConfigError("gamma_sci_db must not exceed gamma0_db")

    def gamma0_for(self, packet_kind: str) -> float:
        return self.per_payload_db.get(packet_kind, self.gamma0_db)


@dataclass(frozen=True)
class GridConfig:
    num_subchannels: int = 5
    subchannel_width_rb: int = 20

    def __post_init__(self) -> None:
        if self.num_subchannels < 1 or self.subchannel_width_rb < 1:
            raise ConfigError("grid dimensions must be >= 1")


@dataclass(frozen=True)
class TrafficConfig:
    cam_rri_ms: int = 100
    pam_rri_ms: int = 20
    cam_payload_bytes: int = 300
    pam_payload_bytes: int = 500
    mcs: int = 3
    event_start_ms: int = 1500
    event_interval_ms: int = 1000
    join_index: int = 2
    leave_index: int = 2
    periodic_during_events: bool = True

    def __post_init__(self) -> None:
        if self.cam_rri_ms < 1 or self.pam_rri_ms < 1:
            raise ConfigError("reservation intervals must be >= 1 ms")


@dataclass(frozen=True)
class RunConfig:
    scenario: Scenario = field(default_factory=Scenario)
    channel: ChannelParams = field(
        default_factory=lambda: ChannelParams(
            pathloss=WinnerB1Los(carrier_ghz=5.9), shadowing_sigma_db=3.0
        )
    )
    budget: LinkBudget = field(default_factory=LinkBudget)
    thresholds: DecodeThresholds = field(default_factory=DecodeThresholds)
    grid: GridConfig = field(default_factory=GridConfig)
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    schedulers: tuple[SchedulerKind, ...] = (SchedulerKind.SB_SPS,)
    rho_list: tuple[float, ...] = tuple(float(r) for r in range(40, 401, 40))
    seeds: tuple[int, ...] = tuple(range(100))
    warmup_ms: int = 1000
    estimator_weights: str | None = None
    trace_path: str | None = None
    out_dir: str = "results"
    vue_scheduler: SchedulerKind = SchedulerKind.SB_SPS

    def __post_init__(self) -> None:
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(r < 0 for r in self.rho_list):
            raise ConfigError("densities must be >= 0")
        if not self.schedulers:
            raise ConfigError("at least one scheduler is required")
        if self.warmup_ms < 0 or self.warmup_ms >= self.scenario.sim_duration_ms:
            raise ConfigError("warmup_ms must be in [0, sim_duration_ms)")
        if self.vue_scheduler not in (SchedulerKind.SB_SPS, SchedulerKind.SB_DS):
            raise ConfigError("background vehicles support only sb-sps or sb-ds")

    def needs_estimator(self) -> bool:
        return any(
            k in (SchedulerKind.MIN_RSSI, SchedulerKind.PR_CARA) for k in self.schedulers
        )


# --- JSON (de)serialization -------------------------------------------------

_PATHLOSS_MODELS = {"power-law": PowerLaw, "winner-b1-los": WinnerB1Los}


def _channel_to_dict(channel: ChannelParams) -> dict:
    if isinstance(channel.pathloss, PowerLaw):
        pathloss: dict[str, Any] = {
            "model": "power-law",
            "constant": channel.pathloss.constant,
            "exponent": channel.pathloss.exponent,
        }
    else:
        pathloss = {"model": "winner-b1-los", "carrier_ghz": channel.pathloss.carrier_ghz}
    return {
        "pathloss": pathloss,
        "shadowing_sigma_db": channel.shadowing_sigma_db,
        "fast_fading": channel.fast_fading.value,
    }


def _channel_from_dict(data: dict) -> ChannelParams:
    data = dict(data)
    pl = dict(data.pop("pathloss", {"model": "winner-b1-los"}))
    model_name = pl.pop("model", "winner-b1-los")
    if model_name not in _PATHLOSS_MODELS:
        raise ConfigError(f"unknown pathloss model {model_name!r}")
    pathloss = _build(_PATHLOSS_MODELS[model_name], pl, "channel.pathloss")
    fading = data.pop("fast_fading", FastFading.NONE.value)
    try:
        fading = FastFading(fading)
    except ValueError as exc:
        raise ConfigError(f"unknown fast_fading {fading!r}") from exc
    return _build(ChannelParams, {**data, "pathloss": pathloss, "fast_fading": fading}, "channel")


def _build(cls, data: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_to_dict(config: RunConfig) -> dict:
    scenario = dataclasses.asdict(config.scenario)
    scenario["traffic"] = config.scenario.traffic.value
    scenario["vue_speed_range_mps"] = list(config.scenario.vue_speed_range_mps)
    return {
        "scenario": scenario,
        "channel": _channel_to_dict(config.channel),
        "budget": dataclasses.asdict(config.budget),
        "thresholds": dataclasses.asdict(config.thresholds),
        "grid": dataclasses.asdict(config.grid),
        "traffic": dataclasses.asdict(config.traffic),
        "schedulers": [k.value for k in config.schedulers],
        "rho_list": list(config.rho_list),
        "seeds": list(config.seeds),
        "warmup_ms": config.warmup_ms,
        "estimator_weights": config.estimator_weights,
        "trace_path": config.trace_path,
        "out_dir": config.out_dir,
        "vue_scheduler": config.vue_scheduler.value,
    }


_TOP_LEVEL_KEYS = {
    "scenario",
    "channel",
    "budget",
    "thresholds",
    "grid",
    "traffic",
    "schedulers",
    "rho_list",
    "seeds",
    "warmup_ms",
    "estimator_weights",
    "trace_path",
    "out_dir",
    "vue_scheduler",
}


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    if "scenario" in data:
        sdata = dict(data["scenario"])
        if "traffic" in sdata:
            try:
                sdata["traffic"] = TrafficMode(sdata["traffic"])
            except ValueError as exc:
                raise ConfigError(f"unknown traffic mode {sdata['traffic']!r}") from exc
        if "vue_speed_range_mps" in sdata:
            sdata["vue_speed_range_mps"] = tuple(sdata["vue_speed_range_mps"])
        kwargs["scenario"] = _build(Scenario, sdata, "scenario")
    if "channel" in data:
        kwargs["channel"] = _channel_from_dict(data["channel"])
    if "budget" in data:
        kwargs["budget"] = _build(LinkBudget, dict(data["budget"]), "budget")
    if "thresholds" in data:
        kwargs["thresholds"] = _build(DecodeThresholds, dict(data["thresholds"]), "thresholds")
    if "grid" in data:
        kwargs["grid"] = _build(GridConfig, dict(data["grid"]), "grid")
    if "traffic" in data:
        kwargs["traffic"] = _build(TrafficConfig, dict(data["traffic"]), "traffic")
    if "schedulers" in data:
        kwargs["schedulers"] = tuple(_scheduler(k) for k in data["schedulers"])
    if "vue_scheduler" in data:
        kwargs["vue_scheduler"] = _scheduler(data["vue_scheduler"])
    for key in ("rho_list", "seeds"):
        if key in data:
            kwargs[key] = tuple(data[key])
    for key in ("warmup_ms", "estimator_weights", "trace_path", "out_dir"):
        if key in data:
            kwargs[key] = data[key]
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _scheduler(name: str) -> SchedulerKind:
    try:
        return SchedulerKind(name)
    except ValueError as exc:
        valid = ", ".join(k.value for k in SchedulerKind)
        raise ConfigError(f"unknown scheduler {name!r} (valid: {valid})") from exc


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(data)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=2) + "\n")


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


def with_overrides(
    config: RunConfig,
    rho_list: tuple[float, ...] | None = None,
    schedulers: tuple[SchedulerKind, ...] | None = None,
    seeds: tuple[int, ...] | None = None,
    out_dir: str | None = None,
    estimator_weights: str | None = None,
) -> RunConfig:
    """CLI flag overrides on top of the loaded document."""
    updates: dict[str, Any] = {}
    if rho_list is not None:
        updates["rho_list"] = rho_list
    if schedulers is not None:
        updates["schedulers"] = schedulers
    if seeds is not None:
        updates["seeds"] = seeds
    if out_dir is not None:
        updates["out_dir"] = out_dir
    if estimator_weights is not None:
        updates["estimator_weights"] = estimator_weights
    return replace(config, **updates) if updates else config
