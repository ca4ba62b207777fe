"""Run configuration: scenario, learner, twin and method settings.

Every parameter any module consumes lives here with its default, so the
effective configuration echoed next to run outputs reproduces a run.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from .learner import Hyperparams
from .model import ChannelParams

WEIGHTS_TOL = 1e-12

LIGHT_TO_HEAVY = (0.05, 0.05, 0.10, 0.15, 0.25, 0.40)
UNIFORM6 = (1 / 6,) * 6
METHOD_KINDS = ("random", "online", "offline", "exploit", "dt")


class ConfigError(ValueError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass
class PhaseConfig:
    name: str
    start_time: float
    end_time: float
    vehicle_count: int
    arrival_rate_lambda: float
    task_type_weights: tuple
    # explicit factors by server id; unlisted servers run at base rate
    server_rate_multipliers: dict = field(default_factory=dict)
    # servers whose factor is drawn once per run from degradation_range
    degraded_servers: tuple = ()
    degradation_range: tuple = (0.30, 0.50)


def default_server_tiers(rows=4, cols=4):
    """Tier per server id (row-major over the RSU lattice).

    Every row holds one low-tier, one mid-tier and two high-tier RSUs, so
    each tier is spread over the whole map.
    """
    tiers = []
    for r in range(rows):
        for c in range(cols):
            if c == r % cols:
                tiers.append("server_low")
            elif c == (r + 2) % cols:
                tiers.append("server_mid")
            else:
                tiers.append("server_high")
    return tiers


def default_degraded_servers(tiers):
    """Four lowest-id high-tier, two mid-tier and two low-tier servers."""
    pick = {"server_high": 4, "server_mid": 2, "server_low": 2}
    out = []
    for sid, tier in enumerate(tiers):
        if pick.get(tier, 0) > 0:
            out.append(sid)
            pick[tier] -= 1
    return tuple(out)


def default_phases():
    base = 1 / 8
    degraded = default_degraded_servers(default_server_tiers())
    heavy = LIGHT_TO_HEAVY
    light = tuple(reversed(LIGHT_TO_HEAVY))
    return [
        PhaseConfig("warmup", 0.0, 500.0, 45, base, UNIFORM6),
        PhaseConfig("phase1", 500.0, 1500.0, 65, base, heavy),
        PhaseConfig("phase2", 1500.0, 2500.0, 65, 1.2 * base, heavy,
                    degraded_servers=degraded),
        PhaseConfig("phase3", 2500.0, 3500.0, 65, 1.2 * base, light),
    ]


@dataclass
class ScenarioConfig:
    extent: float = 2000.0
    block_length: float = 250.0
    rsu_coords: tuple = (250.0, 750.0, 1250.0, 1750.0)
    channel: ChannelParams = field(default_factory=ChannelParams)
    server_tiers: tuple = field(default_factory=lambda: tuple(default_server_tiers()))
    tier_rates: dict = field(default_factory=lambda: {
        "server_low": 2.0e9, "server_mid": 2.5e9, "server_high": 3.5e9})
    vehicle_rate_range: tuple = (0.8e9, 1.2e9)
    speed_range: tuple = (8.0, 14.0)
    task_demand_range: tuple = (1e9, 1e10)
    task_size_range: tuple = (5e5, 1e7)
    n_task_types: int = 6
    # feature scales: f, L, b, D, r are divided by these before entering the net
    norm_rate: float = 1e9
    norm_backlog: float = 1e10
    norm_size: float = 1e7
    norm_demand: float = 1e10
    norm_uplink: float = 1e7
    max_association_range: float = None  # metres; None = every server is a valid action
    phases: list = field(default_factory=default_phases)
    duration: float = None  # None = run to the last phase end

    @property
    def n_servers(self):
        return len(self.rsu_coords) ** 2

    @property
    def horizon(self):
        end = self.phases[-1].end_time if self.phases else 0.0
        return end if self.duration is None else min(end, self.duration)


@dataclass
class DTConfig:
    T_DT: float = 500.0
    scenario_count: int = 1
    perturbation_magnitude: float = 0.05
    pt_speedup_factor: float = 25.0
    tau_reset: float = None  # None = learner tau0
    anneal_fraction: float = 0.8  # share of the twin budget after which tau sits at tau_min
    sync_latency: float = None  # None = scenario_count * T_DT / pt_speedup_factor
    inherit_replay: bool = True

    def latency(self):
        if self.sync_latency is not None:
            return float(self.sync_latency)
        return self.scenario_count * self.T_DT / self.pt_speedup_factor


@dataclass
class MethodSpec:
    kind: str = "online"
    k: int = 1
    T_DT: float = 500.0
    multi_scenario: bool = False
    offline_weights_path: str = None

    @property
    def label(self):
        if self.kind in ("random", "online", "offline"):
            return self.kind
        if self.kind == "exploit":
            return f"exploit_k{self.k}_T{self.T_DT:g}"
        mode = "multi" if self.multi_scenario else "single"
        return f"dt_{mode}_k{self.k}_T{self.T_DT:g}"


@dataclass
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    dt: DTConfig = field(default_factory=DTConfig)
    method: MethodSpec = field(default_factory=MethodSpec)
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "runs"
    weight_format: str = "binary"
    timeseries_window: float = 50.0


# -- validation -------------------------------------------------------------

def _finite_pos(path, value):
    if not isinstance(value, (int, float)) or isinstance(value, bool) \
            or not math.isfinite(value) or value <= 0:
        raise ConfigError(path, f"must be a finite positive number, got {value!r}")


def validate(cfg: RunConfig):
    sc = cfg.scenario
    n = sc.n_servers
    if len(sc.server_tiers) != n:
        raise ConfigError("scenario.server_tiers", f"needs {n} entries, got {len(sc.server_tiers)}")
    for i, t in enumerate(sc.server_tiers):
        if t not in sc.tier_rates:
            raise ConfigError(f"scenario.server_tiers[{i}]", f"unknown tier {t!r}")
    for name, rate in sc.tier_rates.items():
        _finite_pos(f"scenario.tier_rates.{name}", rate)
    for name in ("vehicle_rate_range", "speed_range", "task_demand_range", "task_size_range"):
        lo, hi = getattr(sc, name)
        _finite_pos(f"scenario.{name}[0]", lo)
        if hi < lo:
            raise ConfigError(f"scenario.{name}", "upper bound below lower bound")
    if sc.n_task_types < 1:
        raise ConfigError("scenario.n_task_types", "must be >= 1")
    if sc.duration is not None and sc.duration < 0:
        raise ConfigError("scenario.duration", "must be >= 0")
    prev_end = None
    for i, ph in enumerate(sc.phases):
        p = f"scenario.phases[{i}]"
        if not ph.end_time > ph.start_time:
            raise ConfigError(f"{p}.end_time", "must exceed start_time")
        if prev_end is not None and ph.start_time != prev_end:
            raise ConfigError(f"{p}.start_time", f"phases must be contiguous (previous ends at {prev_end})")
        if i == 0 and ph.start_time != 0:
            raise ConfigError(f"{p}.start_time", "first phase must start at 0")
        prev_end = ph.end_time
        if ph.vehicle_count < 0:
            raise ConfigError(f"{p}.vehicle_count", "must be >= 0")
        _finite_pos(f"{p}.arrival_rate_lambda", ph.arrival_rate_lambda)
        w = ph.task_type_weights
        if len(w) != sc.n_task_types or any(x < 0 for x in w) or abs(sum(w) - 1.0) > WEIGHTS_TOL:
            raise ConfigError(f"{p}.task_type_weights",
                              f"need {sc.n_task_types} non-negative weights summing to 1, got {list(w)}")
        for sid, m in ph.server_rate_multipliers.items():
            if not 0 <= int(sid) < n:
                raise ConfigError(f"{p}.server_rate_multipliers", f"unknown server id {sid}")
            if not 0 < m <= 1:
                raise ConfigError(f"{p}.server_rate_multipliers.{sid}", "factor must lie in (0, 1]")
        for sid in ph.degraded_servers:
            if not 0 <= sid < n:
                raise ConfigError(f"{p}.degraded_servers", f"unknown server id {sid}")
        lo, hi = ph.degradation_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"{p}.degradation_range", "need 0 < low <= high <= 1")
    d = cfg.dt
    if d.T_DT < 0:
        raise ConfigError("dt.T_DT", "must be >= 0")
    if d.scenario_count < 1:
        raise ConfigError("dt.scenario_count", "must be >= 1")
    if not 0 <= d.perturbation_magnitude < 1:
        raise ConfigError("dt.perturbation_magnitude", "must lie in [0, 1)")
    _finite_pos("dt.pt_speedup_factor", d.pt_speedup_factor)
    if d.sync_latency is not None and d.sync_latency < 0:
        raise ConfigError("dt.sync_latency", "must be >= 0")
    m = cfg.method
    if m.kind not in METHOD_KINDS:
        raise ConfigError("method.kind", f"must be one of {METHOD_KINDS}, got {m.kind!r}")
    if m.k < 0:
        raise ConfigError("method.k", "must be >= 0")
    if m.T_DT < 0:
        raise ConfigError("method.T_DT", "must be >= 0")
    if m.kind == "offline" and not m.offline_weights_path:
        raise ConfigError("method.offline_weights_path", "offline method requires a weights file")
    if not cfg.seeds:
        raise ConfigError("seeds", "need at least one seed")
    if cfg.weight_format not in ("binary", "json"):
        raise ConfigError("weight_format", "must be 'binary' or 'json'")
    _finite_pos("timeseries_window", cfg.timeseries_window)
    return cfg


# -- dict <-> dataclass -----------------------------------------------------

def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown key")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _convert(cls, name, value, sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


_NESTED = {
    (RunConfig, "scenario"): ScenarioConfig,
    (RunConfig, "hyperparams"): Hyperparams,
    (RunConfig, "dt"): DTConfig,
    (RunConfig, "method"): MethodSpec,
    (ScenarioConfig, "channel"): ChannelParams,
}
_TUPLES = {"rsu_coords", "server_tiers", "vehicle_rate_range", "speed_range", "task_demand_range",
           "task_size_range", "task_type_weights", "degraded_servers", "degradation_range", "hidden"}


def _convert(cls, name, value, path):
    nested = _NESTED.get((cls, name))
    if nested is not None:
        return _build(nested, value, path)
    if cls is ScenarioConfig and name == "phases":
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list of phases")
        return [_build(PhaseConfig, v, f"{path}[{i}]") for i, v in enumerate(value)]
    if name == "server_rate_multipliers":
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object mapping server id to factor")
        try:
            return {int(k): float(v) for k, v in value.items()}
        except (TypeError, ValueError):
            raise ConfigError(path, "server ids must be integers and factors numbers") from None
    if name in _TUPLES:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, "expected a list")
        return tuple(value)
    return value


def from_dict(data):
    return validate(_build(RunConfig, data or {}, ""))


def to_dict(cfg: RunConfig):
    d = asdict(cfg)
    for ph in d["scenario"]["phases"]:
        ph["server_rate_multipliers"] = {str(k): v for k, v in ph["server_rate_multipliers"].items()}
    return json.loads(json.dumps(d))  # tuples -> lists


def parse_config(path=None):
    """Load and validate a JSON config file; an empty or missing-path config yields defaults."""
    if path is None:
        return from_dict({})
    p = Path(path)
    if not p.exists():
        raise ConfigError("", f"config file not found: {p}")
    text = p.read_text()
    if not text.strip():
        return from_dict({})
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{p}: invalid JSON ({exc})") from None
    return from_dict(data)


def dumps(cfg: RunConfig):
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def with_method(cfg: RunConfig, method: MethodSpec):
    out = copy.deepcopy(cfg)
    out.method = method
    out.dt.T_DT = method.T_DT
    out.dt.scenario_count = 3 if method.multi_scenario else 1
    return validate(out)
