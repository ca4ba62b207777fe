"""Discrete-event engine for the physical system.

Tasks arrive per vehicle as Poisson processes. Each arrival is decided
immediately: the latency is evaluated in closed form from the state at the
decision instant and the task's cycles are reserved on the chosen node.
Node backlogs drain lazily between touches.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import mobility
from .config import PhaseConfig, RunConfig, ScenarioConfig, validate
from .learner import Agent
from .model import ComputeNode, Task, TaskType, default_task_types, end_to_end_latency, uplink_rates

# event kinds, in tie-break priority order at equal times
PHASE_TRANSITION, DT_TRIGGER, DT_SYNC_APPLY, TASK_ARRIVAL = range(4)
EVENT_NAMES = ("phase_transition", "dt_trigger", "dt_sync_apply", "task_arrival")

CSV_HEADER = ("task_id", "vehicle_id", "phase", "decision_time", "action", "t_trans", "t_comp", "t_e2e")


class SimulationError(RuntimeError):
    pass


# -- RNG streams --------------------------------------------------------------

def _tag(x):
    return x if isinstance(x, int) else zlib.crc32(str(x).encode())


class Streams:
    """Independent generators keyed by (master seed, namespace, tag...)."""

    def __init__(self, seed, namespace=()):
        self.seed = int(seed)
        self.namespace = tuple(namespace)

    def get(self, *tags):
        key = tuple(_tag(t) for t in self.namespace + tags)
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=key)))

    def child(self, *tags):
        return Streams(self.seed, self.namespace + tags)


# -- records ----------------------------------------------------------------

@dataclass(slots=True)
class TaskOutcomeRecord:
    task_id: int
    vehicle_id: int
    phase_index: int
    decision_time: float
    action: int
    t_trans: float
    t_comp: float
    t_e2e: float

    def row(self):
        return (self.task_id, self.vehicle_id, self.phase_index, repr(self.decision_time),
                self.action, repr(self.t_trans), repr(self.t_comp), repr(self.t_e2e))


def records_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def read_records_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError("not a task record CSV (header mismatch)")
    return [TaskOutcomeRecord(int(a), int(b), int(c), float(d), int(e), float(f), float(g), float(h))
            for a, b, c, d, e, f, g, h in rows[1:]]


# -- event queue ------------------------------------------------------------

class EventQueue:
    """Min-queue on (time, kind priority, insertion order)."""

    def __init__(self):
        self._heap = []
        self._seq = 0

    def push(self, time, kind, payload=None):
        heapq.heappush(self._heap, (time, kind, self._seq, payload))
        self._seq += 1

    def pop(self):
        time, kind, _, payload = heapq.heappop(self._heap)
        return time, kind, payload

    def peek_time(self):
        return self._heap[0][0] if self._heap else math.inf

    def __len__(self):
        return len(self._heap)


# -- world ------------------------------------------------------------------

class World:
    """All mutable state of one simulated system (physical or twin)."""

    def __init__(self, scenario: ScenarioConfig, task_types, time=0.0):
        self.scenario = scenario
        self.grid = mobility.RoadGrid(scenario.extent, scenario.block_length, tuple(scenario.rsu_coords))
        self.channel = scenario.channel
        self.task_types = list(task_types)
        self.time = time
        self.servers = []
        self.server_pos = np.empty((0, 2))
        self.vehicles = {}  # vid -> ComputeNode
        self.kinematics = {}  # vid -> VehicleKinematics
        self.mobility_rng = {}  # vid -> Generator for turn choices
        self.agents = {}  # vid -> Agent
        self.lam = 0.0
        self.weights = np.full(len(self.task_types), 1.0 / max(1, len(self.task_types)))
        self.phase_index = 0
        n = scenario.n_servers
        self.obs_dim = 4 + 3 * n
        self.n_actions = n + 1
        self._norm = (scenario.norm_rate, scenario.norm_backlog, scenario.norm_size,
                      scenario.norm_demand, scenario.norm_uplink)

    def set_servers(self, servers):
        self.servers = list(servers)
        self.server_pos = np.array([s.position_p for s in self.servers], dtype=float).reshape(-1, 2)

    @property
    def n_servers(self):
        return len(self.servers)

    def vehicle_position(self, vid, t):
        pos = mobility.position(self.kinematics[vid], self.grid, t, self.mobility_rng[vid])
        self.vehicles[vid].position_p = pos
        return pos

    def bring_to(self, vid, t):
        """Drain every node the decision for ``vid`` reads and move ``vid`` to ``t``."""
        self.vehicles[vid].drain_to(t)
        for s in self.servers:
            s.drain_to(t)
        return self.vehicle_position(vid, t)

    def observation(self, vid, task, t=None):
        """Normalised observation plus the raw uplink rates (bits/s) it was built from."""
        t = self.time if t is None else t
        pos = self.bring_to(vid, t)
        dist = mobility.distances(pos, self.server_pos)
        rates = uplink_rates(self.channel, dist)
        nf, nl, nb, nd, nr = self._norm
        v = self.vehicles[vid]
        obs = np.empty(self.obs_dim)
        obs[0] = v.rate_f / nf
        obs[1] = v.backlog_L / nl
        obs[2] = task.size_b / nb
        obs[3] = task.demand_D / nd
        obs[4::3] = [s.rate_f / nf for s in self.servers]
        obs[5::3] = [s.backlog_L / nl for s in self.servers]
        obs[6::3] = rates / nr
        return obs, dist

    def action_mask(self, dist):
        limit = self.scenario.max_association_range
        if limit is None:
            return None
        return np.concatenate(([True], dist <= limit))


def build_observation(vehicle_id, task, world, t=None):
    return world.observation(vehicle_id, task, t)[0]


def assign_task(task, action, world, t=None, dist=None, phase_index=None):
    """Evaluate the latency of ``task`` under ``action`` and reserve its cycles.

    Backlogs are drained to the decision instant first, so the result uses
    the state at that instant. The task's demand is added to the chosen
    node's backlog immediately.
    """
    t = world.time if t is None else t
    vid = task.vehicle_id
    vehicle = world.vehicles[vid]
    if dist is None:
        pos = world.bring_to(vid, t)
        d = None
        if 0 < action <= world.n_servers:
            d = mobility.distance(pos, world.servers[action - 1].position_p)
    else:
        d = float(dist[action - 1]) if 0 < action <= world.n_servers else None
    t_trans, t_comp, t_e2e = end_to_end_latency(action, task, vehicle, world.servers,
                                                world.channel, distance=d)
    node = vehicle if action == 0 else world.servers[action - 1]
    node.backlog_L += task.demand_D
    return TaskOutcomeRecord(task.task_id, vid, world.phase_index if phase_index is None else phase_index,
                             t, int(action), t_trans, t_comp, t_e2e)


def drain_backlogs(world, dt):
    """Advance every node's fluid backlog by ``dt`` seconds of processing."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    t = world.time + dt
    for node in list(world.vehicles.values()) + world.servers:
        node.drain_to(max(t, node.last_update))
    world.time = t


def sample_type(weights_cdf, rng):
    u = rng.random() * weights_cdf[-1]
    return min(int(np.searchsorted(weights_cdf, u, side="right")), len(weights_cdf) - 1)


def generate_arrivals(phase: PhaseConfig, rng, task_types, vehicle_id=0, start=None, first_task_id=0):
    """Poisson arrivals of one vehicle over ``phase``: list of :class:`Task`."""
    t = phase.start_time if start is None else start
    cdf = np.cumsum(phase.task_type_weights)
    out = []
    tid = first_task_id
    while True:
        t += rng.exponential(1.0 / phase.arrival_rate_lambda)
        if t >= phase.end_time:
            return out
        tt = task_types[sample_type(cdf, rng)]
        out.append(Task(tid, vehicle_id, tt.id, tt.demand_cycles, tt.data_size_bits, t))
        tid += 1


# -- world construction -----------------------------------------------------

def make_servers(scenario, grid):
    servers = []
    for sid, (pos, tier) in enumerate(zip(grid.rsu_positions, scenario.server_tiers)):
        rate = float(scenario.tier_rates[tier])
        servers.append(ComputeNode(sid, rate, 0.0, pos, tier, rate))
    return servers


def resolve_multipliers(phases, streams):
    """Concrete server factor maps per phase; degraded factors drawn once per run."""
    rng = streams.get("degrade")
    out = []
    for ph in phases:
        mult = {int(k): float(v) for k, v in ph.server_rate_multipliers.items()}
        lo, hi = ph.degradation_range
        for sid in ph.degraded_servers:
            mult.setdefault(int(sid), float(rng.uniform(lo, hi)))
        out.append(mult)
    return out


def add_vehicles(world, count, streams, now, hp=None, with_agents=False, clone_from=True):
    """Spawn ``count`` vehicles with ids continuing the current range."""
    sc = world.scenario
    first = _next_id(world)
    fleet = streams.get("fleet", first)
    existing = sorted(world.agents)
    clone_rng = streams.get("clone", first)
    for vid in range(first, first + count):
        rate = float(fleet.uniform(*sc.vehicle_rate_range))
        speed = float(fleet.uniform(*sc.speed_range))
        kin = mobility.place_on_edge(vid, world.grid, fleet, speed, now)
        world.kinematics[vid] = kin
        world.mobility_rng[vid] = streams.get("mobility", vid)
        world.vehicles[vid] = ComputeNode(vid, rate, 0.0, kin.position_at(now), "vehicle", rate, now)
        if with_agents:
            if clone_from and existing:
                src = existing[int(clone_rng.integers(len(existing)))]
                world.agents[vid] = world.agents[src].clone(streams.get("exploration", vid))
            else:
                agent = Agent(world.obs_dim, world.n_actions, hp, streams.get("init", vid))
                agent.rng = streams.get("exploration", vid)  # init stream only seeds weights
                world.agents[vid] = agent


def _next_id(world):
    return max(world.vehicles, default=-1) + 1


def build_world(cfg: RunConfig, streams, with_agents=True):
    sc = cfg.scenario
    types = default_task_types(sc.n_task_types, sc.task_demand_range, sc.task_size_range)
    world = World(sc, types)
    world.set_servers(make_servers(sc, world.grid))
    if sc.phases:
        first = sc.phases[0]
        add_vehicles(world, first.vehicle_count, streams, 0.0, cfg.hyperparams, with_agents,
                     clone_from=False)
        world.lam = first.arrival_rate_lambda
        world.weights = np.asarray(first.task_type_weights, dtype=float)
    return world


# -- simulation loop --------------------------------------------------------

class Simulation:
    """Event loop shared by the physical system and the twin.

    ``mode`` selects the decision rule: ``"random"`` (uniform over all
    actions), ``"learn"`` (Boltzmann acting plus per-decision training) or
    ``"frozen"`` (Boltzmann acting, no updates, no temperature decay).
    ``controller`` receives ``dt_trigger`` / ``dt_sync_apply`` events.
    """

    def __init__(self, world, phases, streams, mode="learn", hp=None, multipliers=None,
                 controller=None, horizon=None):
        if mode not in ("random", "learn", "frozen"):
            raise ValueError(f"unknown mode {mode!r}")
        self.world = world
        self.phases = list(phases)
        self.streams = streams
        self.mode = mode
        self.hp = hp
        self.multipliers = multipliers or [{} for _ in self.phases]
        self.controller = controller
        self.agent_hooks = {}  # vid -> callable applied when that vehicle's agent is built
        self.horizon = self.phases[-1].end_time if horizon is None else horizon
        self.queue = EventQueue()
        self.records = []
        self.train_enabled = True
        self.train_steps = 0
        self.losses = 0
        self.next_task_id = 0
        self._arrival_rng = {}
        self._token = {}
        self._cdf = np.cumsum(world.weights)
        self._explore = streams.get("exploration", "random") if mode == "random" else None
        for i, ph in enumerate(self.phases[1:], start=1):
            if ph.start_time < self.horizon:
                self.queue.push(ph.start_time, PHASE_TRANSITION, i)
        for vid in sorted(world.vehicles):
            self._schedule_arrival(vid, world.time)

    # arrivals
    def _schedule_arrival(self, vid, now):
        rng = self._arrival_rng.get(vid)
        if rng is None:
            rng = self._arrival_rng[vid] = self.streams.get("arrivals", vid)
        tok = self._token.get(vid, 0) + 1
        self._token[vid] = tok
        t = now + rng.exponential(1.0 / self.world.lam)
        if t < self.horizon:
            self.queue.push(t, TASK_ARRIVAL, (vid, tok))

    def schedule(self, time, kind, payload=None):
        self.queue.push(time, kind, payload)

    def run(self):
        q = self.queue
        while q.peek_time() < self.horizon:
            t, kind, payload = q.pop()
            self.world.time = t
            if kind == TASK_ARRIVAL:
                self._on_arrival(t, payload)
            elif kind == PHASE_TRANSITION:
                apply_phase_transition(self.world, self.phases[payload], self, payload)
            elif kind == DT_TRIGGER:
                self.controller.on_trigger(self, t, payload)
            elif kind == DT_SYNC_APPLY:
                self.controller.on_sync(self, t, payload)
        return self.records

    def _on_arrival(self, t, payload):
        vid, tok = payload
        world = self.world
        if self._token.get(vid) != tok or vid not in world.vehicles:
            return
        rng = self._arrival_rng[vid]
        tt = world.task_types[sample_type(self._cdf, rng)]
        task = Task(self.next_task_id, vid, tt.id, tt.demand_cycles, tt.data_size_bits, t)
        self.next_task_id += 1
        self._schedule_arrival(vid, t)
        self.decide(task, t)

    def decide(self, task, t):
        world = self.world
        vid = task.vehicle_id
        obs, dist = world.observation(vid, task, t)
        mask = world.action_mask(dist)
        if self.mode == "random":
            if mask is None:
                action = int(self._explore.integers(world.n_actions))
            else:
                valid = np.flatnonzero(mask)
                action = int(valid[self._explore.integers(len(valid))])
        else:
            action = world.agents[vid].act(obs, mask)
        rec = assign_task(task, action, world, t, dist)
        self.records.append(rec)
        if self.mode == "learn":
            agent = world.agents[vid]
            before = agent.train_steps
            agent.record(obs, action, -rec.t_e2e, train=self.train_enabled)
            self.train_steps += agent.train_steps - before
        return rec


def apply_phase_transition(world, phase, sim=None, index=None):
    """Switch ``world`` to ``phase`` at the current time; backlogs are kept."""
    t = world.time
    for node in list(world.vehicles.values()) + world.servers:
        node.drain_to(t)
    mult = sim.multipliers[index] if sim is not None else {
        int(k): float(v) for k, v in phase.server_rate_multipliers.items()}
    for s in world.servers:
        s.rate_f = s.base_rate * mult.get(s.node_id, 1.0)
    n_now = len(world.vehicles)
    if phase.vehicle_count > n_now:
        streams = sim.streams if sim is not None else Streams(0)
        add_vehicles(world, phase.vehicle_count - n_now, streams, t,
                     sim.hp if sim is not None else None,
                     with_agents=sim is not None and sim.mode != "random")
        if sim is not None:
            for vid, make in sim.agent_hooks.items():
                if vid in world.agents and vid >= n_now:
                    world.agents[vid] = make(world.agents[vid])
    elif phase.vehicle_count < n_now:
        for vid in sorted(world.vehicles)[phase.vehicle_count:]:
            for d in (world.vehicles, world.kinematics, world.mobility_rng, world.agents):
                d.pop(vid, None)
    lam_changed = phase.arrival_rate_lambda != world.lam
    world.lam = phase.arrival_rate_lambda
    world.weights = np.asarray(phase.task_type_weights, dtype=float)
    if index is not None:
        world.phase_index = index
    if sim is not None:
        sim._cdf = np.cumsum(world.weights)
        for vid in sorted(world.vehicles):
            if lam_changed or vid not in sim._token:
                # memoryless: the residual wait restarts at the new rate
                sim._schedule_arrival(vid, t)


# -- summaries --------------------------------------------------------------

def nearest_rank(sorted_values, p):
    n = len(sorted_values)
    k = max(1, math.ceil(p / 100.0 * n))
    return float(sorted_values[k - 1])


def summarise(records, phases):
    """Per-phase mean / P90 / P99 / count of end-to-end latency.

    Records are attributed by decision time; the first phase is flagged as
    warm-up.
    """
    starts = [ph.start_time for ph in phases]
    buckets = [[] for _ in phases]
    for r in records:
        i = int(np.searchsorted(starts, r.decision_time, side="right")) - 1
        if 0 <= i < len(phases) and r.decision_time < phases[i].end_time:
            buckets[i].append(r.t_e2e)
    out = []
    for i, (ph, vals) in enumerate(zip(phases, buckets)):
        entry = {"phase": ph.name, "index": i, "start": ph.start_time, "end": ph.end_time,
                 "warmup": i == 0, "count": len(vals), "mean": None, "p90": None, "p99": None}
        if vals:
            vals.sort()
            entry.update(mean=math.fsum(vals) / len(vals), p90=nearest_rank(vals, 90),
                         p99=nearest_rank(vals, 99))
        out.append(entry)
    return out


def summary_json(summaries_by_method):
    return json.dumps(summaries_by_method, indent=2, sort_keys=True)


# -- top-level run (non-twin methods) ---------------------------------------

@dataclass
class RunArtifacts:
    method: str
    seed: int
    records: list
    summary: list
    phases: list
    final_weights: dict = None  # vid -> weight bytes
    train_steps: int = 0
    triggers: int = 0
    twin_scenarios: int = 0
    twin_decisions: int = 0
    param_hash_start: int = None
    param_hash_end: int = None
    sync_reports: list = None

    def records_csv(self):
        return records_csv(self.records)


def run(cfg: RunConfig, method=None, seed=0, controller=None, agents=None):
    """Execute one full physical-system run and return its :class:`RunArtifacts`."""
    return simulate(cfg, method, seed, controller, agents)[0]


def simulate(cfg: RunConfig, method=None, seed=0, controller=None, agents=None):
    """Like :func:`run` but also returns the finished :class:`Simulation`.

    Twin-assisted methods pass a ``controller``; ``agents`` maps vehicle id
    to a callable that transforms the freshly built agent (used to deploy
    loaded weights).
    """
    from .learner import param_hash

    validate(cfg)
    kind = method if isinstance(method, str) else (method or cfg.method).kind
    streams = Streams(seed)
    sc = cfg.scenario
    mode = {"random": "random", "offline": "frozen"}.get(kind, "learn")
    world = build_world(cfg, streams, with_agents=mode != "random")
    if agents is not None:
        for vid, make in agents.items():
            if vid in world.agents:
                world.agents[vid] = make(world.agents[vid])
    sim = Simulation(world, sc.phases, streams, mode, cfg.hyperparams,
                     resolve_multipliers(sc.phases, streams), controller, sc.horizon)
    if sim.multipliers and world.servers:
        for s in world.servers:
            s.rate_f = s.base_rate * sim.multipliers[0].get(s.node_id, 1.0)
    sim.agent_hooks = dict(agents or {})
    if controller is not None:
        controller.attach(sim)
    h0 = param_hash(world.agents) if world.agents else None
    if sc.horizon > 0:
        sim.run()
    recs = sim.records
    summary = summarise(recs, sc.phases) if recs else []
    return RunArtifacts(
        method=kind, seed=seed, records=recs, summary=summary, phases=sc.phases,
        final_weights={vid: a.weights() for vid, a in sorted(world.agents.items())},
        train_steps=sim.train_steps, param_hash_start=h0,
        param_hash_end=param_hash(world.agents) if world.agents else None,
    ), sim
