"""Baselines, twin-assisted variants and the phase-wise comparison report."""
from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .config import MethodSpec, RunConfig, with_method
from .learner import load_weights
from .simcore import RunArtifacts, Streams, simulate
from .twin import TwinController, schedule_triggers

STATS = ("mean", "p90", "p99")


class ReportError(ValueError):
    pass


def read_weight_bundle(path):
    """Load a per-vehicle weight bundle written by :func:`write_weight_bundle`."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"offline weights not found: {p}")
    import base64
    try:
        data = json.loads(p.read_text())
        bundle = {int(k): base64.b64decode(v) for k, v in data["agents"].items()}
    except (ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"corrupt weight bundle {p}: {exc}") from None
    for blob in bundle.values():
        load_weights(blob)  # validates magic, version and checksum
    return bundle


def write_weight_bundle(path, weights: dict):
    import base64
    Path(path).write_text(json.dumps(
        {"version": 1, "agents": {str(k): base64.b64encode(v).decode() for k, v in sorted(weights.items())}},
        sort_keys=True))


def _frozen_loader(blob, tau_min):
    def apply(agent):
        agent.load(blob)
        agent.tau = tau_min
        agent.tau_decay = 1.0
        agent.learning = False
        return agent
    return apply


def run_random(cfg: RunConfig, seed):
    return simulate(with_method(cfg, MethodSpec("random")), "random", seed)[0]


def run_online(cfg: RunConfig, seed):
    return simulate(with_method(cfg, MethodSpec("online")), "online", seed)[0]


def run_offline(cfg: RunConfig, seed, weights_path=None, weights=None):
    """Deploy frozen weights (greedy at tau_min); ``weights`` may be passed in memory."""
    spec = MethodSpec("offline", offline_weights_path=weights_path or "<memory>")
    cfg = with_method(cfg, spec)
    if weights is None:
        weights = read_weight_bundle(weights_path)
    tau_min = cfg.hyperparams.tau_min
    loaders = {vid: _frozen_loader(blob, tau_min) for vid, blob in weights.items()}
    art, sim = simulate(cfg, "offline", seed, agents=loaders)
    art.method = "offline"
    return art


def _run_twin(cfg, seed, spec, exploit):
    cfg = with_method(cfg, spec)
    streams = Streams(seed)
    sched = schedule_triggers(cfg.scenario.phases, spec.k)
    ctl = TwinController(cfg.dt, cfg.hyperparams, sched, streams, exploit=exploit)
    art, sim = simulate(cfg, "dt", seed, controller=ctl)
    art.method = spec.label
    art.triggers = len(ctl.results)
    art.twin_scenarios = sum(r.scenarios for r in ctl.results)
    art.twin_decisions = sum(r.decisions for r in ctl.results)
    art.sync_reports = ctl.sync_reports
    return art


def run_exploit(cfg: RunConfig, seed, k=1, T_DT=500.0):
    return _run_twin(cfg, seed, MethodSpec("exploit", k=k, T_DT=T_DT), exploit=True)


def run_dt(cfg: RunConfig, seed, k=1, T_DT=500.0, multi=False):
    return _run_twin(cfg, seed, MethodSpec("dt", k=k, T_DT=T_DT, multi_scenario=multi), exploit=False)


def run_method(cfg: RunConfig, spec: MethodSpec, seed, offline_weights=None):
    if spec.kind == "random":
        return run_random(cfg, seed)
    if spec.kind == "online":
        return run_online(cfg, seed)
    if spec.kind == "offline":
        return run_offline(cfg, seed, spec.offline_weights_path, offline_weights)
    if spec.kind == "exploit":
        return run_exploit(cfg, seed, spec.k, spec.T_DT)
    if spec.kind == "dt":
        return run_dt(cfg, seed, spec.k, spec.T_DT, spec.multi_scenario)
    raise ValueError(f"unknown method kind {spec.kind!r}")


def table_one_methods():
    """The method matrix of the phase-wise latency table, in row order."""
    return [
        MethodSpec("random"),
        MethodSpec("online"),
        MethodSpec("offline"),
        MethodSpec("exploit", k=1, T_DT=250.0),
        MethodSpec("exploit", k=1, T_DT=500.0),
        MethodSpec("dt", k=1, T_DT=500.0),
        MethodSpec("dt", k=2, T_DT=500.0),
        MethodSpec("dt", k=4, T_DT=500.0),
        MethodSpec("dt", k=1, T_DT=500.0, multi_scenario=True),
        MethodSpec("dt", k=2, T_DT=500.0, multi_scenario=True),
    ]


# -- reporting ----------------------------------------------------------------

def _phase_key(art):
    return tuple((p.name, p.start_time, p.end_time) for p in art.phases)


@dataclass
class ComparisonReport:
    phases: list
    rows: list  # {"method", "seed", "cells": {phase: {stat: value}}}
    medians: list  # same shape, seed = "median"
    timeseries: list = field(default_factory=list)  # (window_start, method, mean_latency)

    @property
    def columns(self):
        return [(ph, st) for ph in self.phases for st in STATS]

    def to_json(self):
        return json.dumps({"phases": self.phases, "rows": self.rows, "medians": self.medians},
                          indent=2, sort_keys=True)

    def table(self, rows=None):
        rows = self.medians if rows is None else rows
        width = max([len("method")] + [len(r["method"]) for r in rows]) + 2
        head = "method".ljust(width) + "".join(f"{ph[:8] + ' ' + st:>18}" for ph, st in self.columns)
        lines = [head, "-" * len(head)]
        for r in rows:
            cells = []
            for ph, st in self.columns:
                v = r["cells"][ph][st]
                cells.append(f"{'-' if v is None else format(v, '.3f'):>18}")
            lines.append(r["method"].ljust(width) + "".join(cells))
        return "\n".join(lines)

    def timeseries_csv(self):
        lines = ["window_start,method,mean_latency"]
        for start, method, mean in self.timeseries:
            lines.append(f"{start!r},{method},{'' if mean is None else repr(mean)}")
        return "\n".join(lines) + "\n"


def _cells(summary):
    return {e["phase"]: {st: e[st] for st in STATS} for e in summary}


def _median(values):
    vals = [v for v in values if v is not None]
    return statistics.median(vals) if vals else None


def windowed_means(records, horizon, window=50.0):
    """Tumbling-window mean latency keyed by window start; ``None`` for empty windows."""
    n = max(1, math.ceil(horizon / window)) if horizon > 0 else 0
    sums = [0.0] * n
    counts = [0] * n
    for r in records:
        i = int(r.decision_time // window)
        if 0 <= i < n:
            sums[i] += r.t_e2e
            counts[i] += 1
    return [(i * window, sums[i] / counts[i] if counts[i] else None) for i in range(n)]


def compare(artifacts, window=50.0):
    """Phase x {mean, P90, P99} grid per run plus the median over seeds per method."""
    if not artifacts:
        raise ReportError("nothing to compare")
    key = _phase_key(artifacts[0])
    for a in artifacts[1:]:
        if _phase_key(a) != key:
            raise ReportError(f"phase boundaries differ between runs ({a.method} seed {a.seed})")
    phases = [name for name, _, _ in key]
    rows, order, by_method = [], [], {}
    for a in artifacts:
        cells = _cells(a.summary) if a.summary else {ph: dict.fromkeys(STATS) for ph in phases}
        rows.append({"method": a.method, "seed": a.seed, "cells": cells})
        if a.method not in by_method:
            order.append(a.method)
            by_method[a.method] = []
        by_method[a.method].append(cells)
    medians = []
    for m in order:
        cells = {ph: {st: _median(c[ph][st] for c in by_method[m]) for st in STATS} for ph in phases}
        medians.append({"method": m, "seed": "median", "cells": cells})
    horizon = key[-1][2] if key else 0.0
    series = []
    for m in order:
        recs = [r for a in artifacts if a.method == m for r in a.records]
        for start, mean in windowed_means(recs, horizon, window):
            series.append((start, m, mean))
    return ComparisonReport(phases, rows, medians, series)


def bar_rows(report: ComparisonReport):
    """(method, phase, mean) rows from the median table, methods in first-seen order."""
    return [(r["method"], ph, r["cells"][ph]["mean"]) for r in report.medians for ph in report.phases]


def save_artifacts(art: RunArtifacts, out_dir, weight_format="binary"):
    """Write records CSV, summary JSON and final weights into ``out_dir``."""
    from .learner import load_weights as _lw, save_weights
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "records.csv").write_text(art.records_csv())
    meta = {"method": art.method, "seed": art.seed, "train_steps": art.train_steps,
            "triggers": art.triggers, "twin_scenarios": art.twin_scenarios,
            "twin_decisions": art.twin_decisions,
            "phases": [{"name": p.name, "start": p.start_time, "end": p.end_time} for p in art.phases]}
    (out / "summary.json").write_text(json.dumps({art.method: art.summary, "meta": meta},
                                                 indent=2, sort_keys=True))
    if art.final_weights:
        weights = art.final_weights
        if weight_format == "json":
            weights = {vid: save_weights(*_lw(b), fmt="json") for vid, b in weights.items()}
        write_weight_bundle(out / "weights.json", weights)
    return out


def load_artifacts(run_dir):
    """Rebuild a :class:`RunArtifacts` from a directory written by :func:`save_artifacts`."""
    from .config import PhaseConfig
    from .simcore import read_records_csv
    d = Path(run_dir)
    summary = json.loads((d / "summary.json").read_text())
    meta = summary["meta"]
    phases = [PhaseConfig(p["name"], p["start"], p["end"], 0, 1.0, ()) for p in meta["phases"]]
    return RunArtifacts(method=meta["method"], seed=meta["seed"],
                        records=read_records_csv((d / "records.csv").read_text()),
                        summary=summary[meta["method"]], phases=phases,
                        train_steps=meta["train_steps"], triggers=meta["triggers"],
                        twin_scenarios=meta["twin_scenarios"], twin_decisions=meta["twin_decisions"])
