"""Channel, delay and reward physics for V2I task offloading.

All functions are pure and operate in double precision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

D_MIN = 1.0  # metres; distances below this are clamped (rate diverges at d=0)

TIERS = ("vehicle", "server_low", "server_mid", "server_high")


class ParameterError(ValueError):
    pass


class ActionError(ValueError):
    pass


def _check_positive(name, value):
    if not (math.isfinite(value) and value > 0):
        raise ParameterError(f"{name} must be finite and > 0, got {value!r}")


@dataclass(frozen=True)
class ChannelParams:
    bandwidth_B: float = 1e6
    tx_power_P: float = 1.0  # 30 dBm
    path_loss_alpha: float = 4.0
    noise_sigma2: float = 1e-13

    def __post_init__(self):
        for name in ("bandwidth_B", "tx_power_P", "path_loss_alpha", "noise_sigma2"):
            _check_positive(name, getattr(self, name))


@dataclass(frozen=True)
class TaskType:
    id: int
    demand_cycles: float
    data_size_bits: float


def default_task_types(n=6, demand=(1e9, 1e10), size=(5e5, 1e7)):
    """Task types log-spaced over the demand and data-size ranges, light to heavy."""
    demands = np.geomspace(demand[0], demand[1], n)
    sizes = np.geomspace(size[0], size[1], n)
    return [TaskType(i, float(demands[i]), float(sizes[i])) for i in range(n)]


@dataclass
class Task:
    task_id: int
    vehicle_id: int
    type_id: int
    demand_D: float
    size_b: float
    created_at: float

    def __post_init__(self):
        if not self.demand_D > 0:
            raise ParameterError("task demand must be > 0")
        if not self.size_b > 0:
            raise ParameterError("task size must be > 0")
        if self.created_at < 0:
            raise ParameterError("task creation time must be >= 0")


@dataclass
class ComputeNode:
    """A vehicle or RSU processor with a fluid backlog of reserved cycles.

    The backlog drains lazily: ``last_update`` is the instant ``backlog_L``
    was last brought up to date.
    """

    node_id: int
    rate_f: float
    backlog_L: float = 0.0
    position_p: tuple = (0.0, 0.0)
    tier: str = "vehicle"
    base_rate: float = field(default=None)
    last_update: float = 0.0

    def __post_init__(self):
        if self.base_rate is None:
            self.base_rate = self.rate_f
        if self.tier not in TIERS:
            raise ParameterError(f"unknown tier {self.tier!r}")

    def backlog_at(self, t):
        """Backlog at time ``t`` without mutating the node."""
        return max(0.0, self.backlog_L - self.rate_f * (t - self.last_update))

    def drain_to(self, t):
        self.backlog_L = self.backlog_at(t)
        self.last_update = t


def uplink_rate(ch: ChannelParams, distance_d: float) -> float:
    d = max(float(distance_d), D_MIN)
    snr = ch.tx_power_P * d ** (-ch.path_loss_alpha) / ch.noise_sigma2
    return ch.bandwidth_B * math.log2(1.0 + snr)


def uplink_rates(ch: ChannelParams, distances: np.ndarray) -> np.ndarray:
    """Vectorised :func:`uplink_rate` over an array of distances."""
    d = np.maximum(np.asarray(distances, dtype=float), D_MIN)
    snr = ch.tx_power_P * d ** (-ch.path_loss_alpha) / ch.noise_sigma2
    return ch.bandwidth_B * np.log2(1.0 + snr)


def transmission_delay(size_b: float, rate_r: float) -> float:
    if not rate_r > 0:
        raise ParameterError(f"rate must be > 0, got {rate_r!r}")
    if size_b < 0:
        raise ParameterError("size must be >= 0")
    return size_b / rate_r


def server_compute_delay(backlog_L: float, demand_D: float, rate_f: float) -> float:
    if not rate_f > 0:
        raise ParameterError(f"processing rate must be > 0, got {rate_f!r}")
    return (backlog_L + demand_D) / rate_f


# Same fluid formula evaluated on the vehicle's own processor.
local_compute_delay = server_compute_delay


def end_to_end_latency(action, task, vehicle, servers, ch, distance=None):
    """Return ``(t_trans, t_comp, t_e2e)`` for executing ``task`` under ``action``.

    ``action`` 0 runs locally on ``vehicle``; ``j > 0`` offloads to
    ``servers[j - 1]``. Backlogs are read as currently stored on the nodes,
    so callers must drain them to the decision instant first. ``distance``
    defaults to the Euclidean vehicle-server distance.
    """
    if action == 0:
        t_comp = local_compute_delay(vehicle.backlog_L, task.demand_D, vehicle.rate_f)
        return 0.0, t_comp, t_comp
    if not 0 < action <= len(servers):
        raise ActionError(f"action {action} out of range [0, {len(servers)}]")
    server = servers[action - 1]
    if distance is None:
        distance = math.dist(vehicle.position_p, server.position_p)
    t_trans = transmission_delay(task.size_b, uplink_rate(ch, distance))
    t_comp = server_compute_delay(server.backlog_L, task.demand_D, server.rate_f)
    return t_trans, t_comp, t_trans + t_comp


def reward(t_e2e: float) -> float:
    return -t_e2e
