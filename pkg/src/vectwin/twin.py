"""Snapshot -> accelerated twin training -> weight synchronisation.

The twin is a second :class:`~vectwin.simcore.World` rebuilt from an
immutable :class:`Snapshot`, driven by the same event loop as the physical
system but over a single context. Only the snapshot goes in and only weight
bytes come out, so running the twin inline is equivalent to running it
concurrently with the physical system.
"""
from __future__ import annotations

import base64
import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import mobility
from .config import DTConfig, PhaseConfig
from .learner import Agent, Hyperparams, load_weights
from .model import ComputeNode, TaskType
from .simcore import DT_SYNC_APPLY, DT_TRIGGER, Simulation, Streams, World

log = logging.getLogger(__name__)

SNAPSHOT_VERSION = 1


class SnapshotFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NodeState:
    node_id: int
    rate_f: float
    backlog_L: float
    position: tuple
    base_rate: float
    tier: str


@dataclass(frozen=True)
class VehicleState:
    node: NodeState
    speed: float
    heading: str


@dataclass(frozen=True)
class Snapshot:
    servers: tuple
    vehicles: tuple
    arrival_rate_lambda: float
    task_type_weights: tuple
    task_types: tuple  # ((id, demand, size), ...)
    agent_weights: tuple  # ((vid, bytes), ...), sorted by vid
    captured_at: float
    phase_index: int = 0

    @property
    def weights_by_id(self):
        return dict(self.agent_weights)

    def to_dict(self):
        return {
            "version": SNAPSHOT_VERSION,
            "captured_at": self.captured_at,
            "phase_index": self.phase_index,
            "arrival_rate_lambda": self.arrival_rate_lambda,
            "task_type_weights": list(self.task_type_weights),
            "task_types": [list(t) for t in self.task_types],
            "servers": [_node_dict(s) for s in self.servers],
            "vehicles": [dict(_node_dict(v.node), speed=v.speed, heading=v.heading)
                         for v in self.vehicles],
            "agent_weights": {str(vid): base64.b64encode(b).decode() for vid, b in self.agent_weights},
        }

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self):
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    @classmethod
    def loads(cls, text):
        try:
            d = json.loads(text)
        except (ValueError, TypeError) as exc:
            raise SnapshotFormatError(f"snapshot is not valid JSON: {exc}") from None
        if d.get("version") != SNAPSHOT_VERSION:
            raise SnapshotFormatError(f"unsupported snapshot version {d.get('version')!r}")
        try:
            return cls(
                servers=tuple(_node_from(s) for s in d["servers"]),
                vehicles=tuple(VehicleState(_node_from(v), float(v["speed"]), v["heading"])
                               for v in d["vehicles"]),
                arrival_rate_lambda=float(d["arrival_rate_lambda"]),
                task_type_weights=tuple(float(x) for x in d["task_type_weights"]),
                task_types=tuple((int(i), float(dm), float(sz)) for i, dm, sz in d["task_types"]),
                agent_weights=tuple(sorted((int(k), base64.b64decode(v))
                                           for k, v in d["agent_weights"].items())),
                captured_at=float(d["captured_at"]),
                phase_index=int(d.get("phase_index", 0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SnapshotFormatError(f"malformed snapshot: {exc}") from None


def _node_dict(n):
    return {"node_id": n.node_id, "rate_f": n.rate_f, "backlog_L": n.backlog_L,
            "position": list(n.position), "base_rate": n.base_rate, "tier": n.tier}


def _node_from(d):
    return NodeState(int(d["node_id"]), float(d["rate_f"]), float(d["backlog_L"]),
                     tuple(float(x) for x in d["position"]), float(d["base_rate"]), d["tier"])


def capture_snapshot(world: World) -> Snapshot:
    """Immutable copy of node states, context and agent weights at ``world.time``.

    Backlogs are read as drained to now without mutating the nodes, so
    capturing never perturbs the physical system.
    """
    t = world.time
    servers = tuple(NodeState(s.node_id, s.rate_f, s.backlog_at(t), tuple(s.position_p),
                              s.base_rate, s.tier) for s in world.servers)
    vehicles = []
    for vid in sorted(world.vehicles):
        node = world.vehicles[vid]
        kin = world.kinematics[vid]
        pos = mobility.position(kin, world.grid, t, world.mobility_rng[vid])
        vehicles.append(VehicleState(NodeState(vid, node.rate_f, node.backlog_at(t), pos,
                                               node.base_rate, node.tier), kin.speed, kin.heading))
    return Snapshot(
        servers=servers,
        vehicles=tuple(vehicles),
        arrival_rate_lambda=world.lam,
        task_type_weights=tuple(float(x) for x in world.weights),
        task_types=tuple((tt.id, tt.demand_cycles, tt.data_size_bits) for tt in world.task_types),
        agent_weights=tuple((vid, world.agents[vid].weights()) for vid in sorted(world.agents)),
        captured_at=t,
        phase_index=world.phase_index,
    )


@dataclass(frozen=True)
class Perturbation:
    """Multiplicative factors for one twin scenario (identity by default)."""
    speed: dict = field(default_factory=dict)  # vid -> factor
    demand: dict = field(default_factory=dict)  # type id -> factor
    size: dict = field(default_factory=dict)  # type id -> factor


def perturb_scenario(snap: Snapshot, magnitude, rng) -> Perturbation:
    """Independent U[1-m, 1+m] factors per vehicle speed and per task-type demand and size."""
    if not 0 <= magnitude < 1:
        raise ValueError("perturbation magnitude must lie in [0, 1)")
    if magnitude == 0:
        return Perturbation()
    lo, hi = 1 - magnitude, 1 + magnitude
    speed = {v.node.node_id: float(rng.uniform(lo, hi)) for v in snap.vehicles}
    demand = {t[0]: float(rng.uniform(lo, hi)) for t in snap.task_types}
    size = {t[0]: float(rng.uniform(lo, hi)) for t in snap.task_types}
    return Perturbation(speed, demand, size)


def reconstruct_env(snap: Snapshot, scenario, hp: Hyperparams, streams: Streams,
                    perturbation: Perturbation = None, tau=None):
    """Twin world initialised from ``snap``.

    Node rates, backlogs and positions are copied exactly; each vehicle's
    future route is redrawn from the twin streams; agents are rebuilt from
    the snapshot weights with empty replay buffers.
    """
    p = perturbation or Perturbation()
    t0 = snap.captured_at
    types = [TaskType(i, dm * p.demand.get(i, 1.0), sz * p.size.get(i, 1.0))
             for i, dm, sz in snap.task_types]
    world = World(scenario, types, time=t0)
    world.set_servers([ComputeNode(s.node_id, s.rate_f, s.backlog_L, s.position, s.tier,
                                   s.base_rate, t0) for s in snap.servers])
    route = streams.get("routes")
    for v in snap.vehicles:
        n = v.node
        vid = n.node_id
        world.vehicles[vid] = ComputeNode(vid, n.rate_f, n.backlog_L, n.position, n.tier,
                                          n.base_rate, t0)
        speed = v.speed * p.speed.get(vid, 1.0)
        world.kinematics[vid] = mobility.kinematics_from_position(vid, n.position, speed,
                                                                  world.grid, route, t0)
        world.mobility_rng[vid] = streams.get("mobility", vid)
    world.lam = snap.arrival_rate_lambda
    world.weights = np.asarray(snap.task_type_weights, dtype=float)
    world.phase_index = snap.phase_index
    for vid, blob in snap.agent_weights:
        if vid not in world.vehicles:
            continue
        net, target = load_weights(blob)
        agent = Agent(world.obs_dim, world.n_actions, hp, streams.get("exploration", vid), net, target)
        if tau is not None:
            agent.tau = tau
        world.agents[vid] = agent
    return world


def tau_decay_for_budget(hp, lam, total_budget, tau0, fraction=0.8):
    """Per-decision factor taking tau from tau0 to tau_min after ``fraction`` of the budget.

    Uses the expected per-agent decision count ``lam * total_budget``.
    """
    n = fraction * lam * total_budget
    if n <= 1 or tau0 <= hp.tau_min:
        return hp.tau_min / tau0 if tau0 > hp.tau_min else 1.0
    return (hp.tau_min / tau0) ** (1.0 / n)


def dt_train(twin: World, cfg: DTConfig, hp: Hyperparams, streams: Streams, tau_decay=None):
    """Run the twin for ``cfg.T_DT`` seconds of its single context, learning every decision.

    Returns ``(theta_dt, sim)`` where ``theta_dt`` maps vehicle id to weight
    bytes.
    """
    t0 = twin.time
    if tau_decay is not None:
        for a in twin.agents.values():
            a.tau_decay = tau_decay
    phase = PhaseConfig("twin", t0, t0 + cfg.T_DT, len(twin.vehicles), twin.lam,
                        tuple(float(x) for x in twin.weights))
    sim = Simulation(twin, [phase], streams, "learn", hp, [{}], horizon=t0 + cfg.T_DT)
    if cfg.T_DT > 0:
        sim.run()
    theta = {vid: a.weights() for vid, a in sorted(twin.agents.items())}
    return theta, sim


@dataclass
class TriggerResult:
    theta: dict
    scenarios: int
    decisions: int
    buffer_sizes: int
    snapshot_digest: str


def run_trigger(snap: Snapshot, scenario, cfg: DTConfig, hp: Hyperparams, streams: Streams,
                buffers=None):
    """Chain ``cfg.scenario_count`` twin scenarios from ``snap``, carrying weights forward.

    The first scenario is unperturbed; later ones apply fresh perturbations.
    Temperature restarts at tau0 and anneals across the whole chained budget.
    Replay buffers start empty (or from ``buffers``, copies of the physical
    ones) and persist across the chain together with optimiser state.
    """
    tau0 = hp.tau0 if cfg.tau_reset is None else cfg.tau_reset
    total = cfg.scenario_count * cfg.T_DT
    decay = tau_decay_for_budget(hp, snap.arrival_rate_lambda, total, tau0, cfg.anneal_fraction)
    current = snap
    carried = {}
    if buffers:
        carried = {vid: {"buffer": copy.deepcopy(buf)} for vid, buf in buffers.items()}
    decisions = buffered = 0
    theta = snap.weights_by_id
    for i in range(cfg.scenario_count):
        sub = streams.child("scenario", i)
        pert = perturb_scenario(snap, cfg.perturbation_magnitude, sub.get("perturbation")) if i else None
        twin = reconstruct_env(current, scenario, hp, sub, pert, tau=tau0)
        for vid, agent in twin.agents.items():
            for name, value in carried.get(vid, {}).items():
                setattr(agent, name, value)
        theta, sim = dt_train(twin, cfg, hp, sub, decay)
        decisions += len(sim.records)
        buffered = sum(len(a.buffer) for a in twin.agents.values())
        carried = {vid: {"buffer": a.buffer, "optimizer": a.optimizer, "train_steps": a.train_steps,
                         "tau": a.tau} for vid, a in twin.agents.items()}
        current = replace(snap, agent_weights=tuple(sorted(theta.items())))
    return TriggerResult(theta, cfg.scenario_count, decisions, buffered, snap.digest())


def sync_weights(world: World, theta: dict, exploit=False, tau_min=None, rng=None):
    """Overwrite physical agents with twin weights; returns the list of mismatched ids.

    Vehicles without a twin counterpart take the weights of a uniformly
    chosen twin agent. Replay buffers and temperature schedules are kept
    unless ``exploit`` clamps temperature to ``tau_min``.
    """
    missing = [vid for vid in sorted(world.agents) if vid not in theta]
    stale = [vid for vid in sorted(theta) if vid not in world.agents]
    donors = sorted(theta)
    for vid in sorted(world.agents):
        agent = world.agents[vid]
        if vid in theta:
            agent.load(theta[vid])
        elif donors:
            pick = donors[int(rng.integers(len(donors)))] if rng is not None else donors[0]
            agent.load(theta[pick])
        if exploit:
            agent.tau = agent.hp.tau_min if tau_min is None else tau_min
    if missing or stale:
        log.info("weight sync id mismatch: missing=%s stale=%s", missing, stale)
    return missing + stale


@dataclass
class TriggerSchedule:
    k: int
    trigger_times: list


def schedule_triggers(phases, k, skip_first=True):
    """``k`` evenly spaced triggers per phase, the first exactly at the phase start."""
    if k < 0:
        raise ValueError("k must be >= 0")
    times = []
    for ph in phases[1:] if skip_first else phases:
        length = ph.end_time - ph.start_time
        times += [ph.start_time + i * length / k for i in range(k)]
    return TriggerSchedule(k, times)


class TwinController:
    """Drives triggers and delayed syncs inside a physical-system simulation.

    At a trigger the snapshot is captured, the twin trains to completion and
    the resulting weights are applied ``sync latency`` seconds later. Gradient
    updates in the physical system are paused during that window.
    """

    def __init__(self, dt_cfg: DTConfig, hp: Hyperparams, schedule: TriggerSchedule,
                 streams: Streams, exploit=False, keep_snapshots=False):
        self.cfg = dt_cfg
        self.hp = hp
        self.schedule = schedule
        self.streams = streams
        self.exploit = exploit
        self.keep_snapshots = keep_snapshots
        self.snapshots = []
        self.results = []
        self.sync_reports = []
        self.pending = 0

    def attach(self, sim):
        for i, t in enumerate(self.schedule.trigger_times):
            if t < sim.horizon:
                sim.schedule(t, DT_TRIGGER, i)

    def on_trigger(self, sim, t, index):
        snap = capture_snapshot(sim.world)
        if self.keep_snapshots:
            self.snapshots.append(snap)
        buffers = None
        if self.cfg.inherit_replay:
            buffers = {vid: a.buffer for vid, a in sim.world.agents.items()}
        result = run_trigger(snap, sim.world.scenario, self.cfg, self.hp,
                             self.streams.child("twin", index), buffers)
        self.results.append(result)
        self.pending += 1
        sim.train_enabled = False
        sim.schedule(t + self.cfg.latency(), DT_SYNC_APPLY, (index, result.theta))

    def on_sync(self, sim, t, payload):
        index, theta = payload
        rng = self.streams.get("sync", index)
        mismatch = sync_weights(sim.world, theta, self.exploit, self.hp.tau_min, rng)
        self.sync_reports.append({"trigger": index, "time": t, "mismatched_ids": mismatch})
        self.pending -= 1
        if self.pending == 0:
            sim.train_enabled = True
