"""Acceptance criteria, one verdict line each.

Criteria 1-7 are exact checks on small inputs. Criteria 8 and 9 run the
full default schedule (3500 s, 45/65 vehicles) for every method over five
seeds and compare medians. Those runs take a while, so their per-phase
summaries are cached in the pytest cache, keyed by the package source and
the configuration; delete ``.pytest_cache`` to force a rerun.
"""
import copy
import hashlib
import json
import math
import statistics
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

import vectwin
from conftest import VERDICTS, make_short_cfg
from test_simcore import brute_force_backlog
from test_twin import Probe
from vectwin import simcore
from vectwin.config import RunConfig, to_dict
from vectwin.experiments import run_dt, run_exploit, run_offline, run_online, run_random
from vectwin.learner import DuelingQNet, boltzmann_probs, gradient_check
from vectwin.model import (ChannelParams, ComputeNode, Task, end_to_end_latency, local_compute_delay,
                           server_compute_delay, transmission_delay, uplink_rate)

# held out from the seeds used while choosing hyperparameters
SEEDS = (10, 11, 12, 13, 14)


def verdict(ok, label, detail):
    line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
    VERDICTS.append(line)
    print(line)
    return ok


# 1. equation oracles ---------------------------------------------------------

def _hand_rate(d):
    snr = 1.0 * d ** -4.0 / 1e-13
    return 1e6 * math.log(1.0 + snr) / math.log(2.0)


def test_c1_equation_oracles():
    t0 = time.perf_counter()
    ch = ChannelParams()
    pairs = []
    r100 = uplink_rate(ch, 100.0)
    pairs.append(("rate(100 m)", r100, _hand_rate(100.0)))
    pairs.append(("rate(1000 m)", uplink_rate(ch, 1000.0), 1e6 * math.log(11.0) / math.log(2.0)))
    pairs.append(("t_trans(1e6 b)", transmission_delay(1e6, r100), 1e6 / _hand_rate(100.0)))
    pairs.append(("t_trans(1e7 b, 1e6 bps)", transmission_delay(1e7, 1e6), 10.0))
    pairs.append(("t_comp(5e9, 1e9, 3.5e9)", server_compute_delay(5e9, 1e9, 3.5e9), 6.0 / 3.5))
    pairs.append(("t_comp(0, 2e9, 2e9)", server_compute_delay(0.0, 2e9, 2e9), 1.0))
    pairs.append(("t_local(0, 1e9, 1e9)", local_compute_delay(0.0, 1e9, 1e9), 1.0))
    pairs.append(("t_local(1e9, 1e9, 0.8e9)", local_compute_delay(1e9, 1e9, 0.8e9), 2.5))
    task = Task(0, 0, 0, 1e9, 1e6, 0.0)
    veh = ComputeNode(0, 1e9, 0.0, (0.0, 0.0), "vehicle")
    srv = ComputeNode(0, 2e9, 0.0, (100.0, 0.0), "server_low")
    pairs.append(("e2e local", end_to_end_latency(0, task, veh, [srv], ch)[2], 1.0))
    pairs.append(("e2e offload", end_to_end_latency(1, task, veh, [srv], ch)[2], 1e6 / _hand_rate(100.0) + 0.5))
    worst = max(abs(got - want) / abs(want) for _, got, want in pairs)
    # the rounded values printed in the examples
    printed = (abs(r100 / 1.6610e7 - 1) < 1e-4 and abs(uplink_rate(ch, 1000.0) / 3.4594e6 - 1) < 1e-4
               and abs(pairs[9][1] - 0.5602) < 1e-4)
    ok = worst < 1e-9 and printed
    verdict(ok, "1 equation oracles",
            f"max relative error {worst:.2e} over {len(pairs)} cases (< 1e-9), "
            f"{time.perf_counter() - t0:.3f}s")
    assert ok


# 2. gradient correctness -----------------------------------------------------

def test_c2_gradient_check():
    rng = np.random.default_rng(20240)
    worst = 0.0
    for i in range(100):
        n_in, n_act = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        hidden = tuple(int(h) for h in rng.integers(3, 9, size=int(rng.integers(1, 3))))
        net = DuelingQNet(n_in, n_act, hidden).init_params(rng)
        err, _, _ = gradient_check(net, rng.normal(size=n_in), int(rng.integers(n_act)), float(rng.normal(0, 3)))
        worst = max(worst, err)
    ok = worst < 1e-4
    verdict(ok, "2 gradient check", f"max relative error {worst:.2e} over 100 nets (< 1e-4)")
    assert ok


# 3. Boltzmann properties -----------------------------------------------------

def test_c3_boltzmann():
    rng = np.random.default_rng(3)
    norm_err = shift_err = 0.0
    for _ in range(2000):
        q = rng.normal(0, rng.choice([0.1, 1, 100]), size=int(rng.integers(2, 18)))
        tau = float(10 ** rng.uniform(-2, 2))
        p = boltzmann_probs(q, tau)
        norm_err = max(norm_err, abs(p.sum() - 1.0))
        shift_err = max(shift_err, np.max(np.abs(p - boltzmann_probs(q + rng.uniform(-1e3, 1e3), tau))))
    greedy = boltzmann_probs(np.array([1.0, 0.0]), 0.01)[0]
    ok = norm_err <= 1e-9 and shift_err <= 1e-12 and greedy > 1 - 1e-10
    verdict(ok, "3 Boltzmann", f"normalisation err {norm_err:.1e}, shift err {shift_err:.1e}, "
                               f"pi(argmax) at tau=0.01 is 1-{1 - greedy:.1e}")
    assert ok


# 4. fluid-queue oracle -------------------------------------------------------

def test_c4_fluid_queue():
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(100):
        f = float(rng.uniform(0.5e9, 4e9))
        L0 = float(rng.uniform(0, 5e9))
        n = int(rng.integers(1, 15))
        ticks = np.sort(rng.choice(np.arange(1, 2500), size=n, replace=False))
        arrivals = [(int(k) * 1e-3, float(rng.uniform(1e8, 5e9))) for k in ticks]
        ref = brute_force_backlog(f, L0, arrivals, 3.0)
        node = ComputeNode(0, f, L0, (0.0, 0.0), "server_low", f, 0.0)
        events = sorted([(int(k), 0, d) for k, (_, d) in zip(ticks, arrivals)]
                        + [(int(k), 1, None) for k in range(0, 3001, 7)])
        for k, kind, d in events:
            if kind == 0:
                node.drain_to(k * 1e-3)
                node.backlog_L += d
            else:
                got, want = node.backlog_at(k * 1e-3), ref[k]
                worst = max(worst, abs(got - want) / max(want, 1.0))
    ok = worst < 1e-6
    verdict(ok, "4 fluid queue", f"max relative backlog error {worst:.2e} vs 1 ms integrator (< 1e-6)")
    assert ok


# 5. determinism --------------------------------------------------------------

def test_c5_determinism():
    cfg = make_short_cfg()
    outcomes = {}
    online = run_online(copy.deepcopy(cfg), 7)
    for name, fn in [
        ("random", lambda: run_random(copy.deepcopy(cfg), 7)),
        ("online", lambda: run_online(copy.deepcopy(cfg), 7)),
        ("offline", lambda: run_offline(copy.deepcopy(cfg), 7, weights=online.final_weights)),
        ("exploit", lambda: run_exploit(copy.deepcopy(cfg), 7, k=1, T_DT=20.0)),
        ("dt multi", lambda: run_dt(copy.deepcopy(cfg), 7, k=2, T_DT=20.0, multi=True)),
    ]:
        outcomes[name] = fn().records_csv() == fn().records_csv()
    ok = all(outcomes.values())
    verdict(ok, "5 determinism", ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in outcomes.items()))
    assert ok


# 6. degeneracy ---------------------------------------------------------------

def test_c6_degeneracy():
    cfg = make_short_cfg()
    online = run_online(copy.deepcopy(cfg), 8)
    k0 = run_dt(copy.deepcopy(cfg), 8, k=0, T_DT=20.0)
    zcfg = copy.deepcopy(cfg)
    zcfg.dt.sync_latency = 0.0
    zero = run_dt(zcfg, 8, k=2, T_DT=0.0)
    same_k0 = k0.records_csv() == online.records_csv()
    same_zero = zero.records_csv() == online.records_csv() and zero.final_weights == online.final_weights
    ok = same_k0 and same_zero and zero.triggers == 6
    verdict(ok, "6 degeneracy", f"k=0 byte-identical: {same_k0}; T_DT=0 with zero latency "
                                f"({zero.triggers} triggers) records and weights identical: {same_zero}")
    assert ok


# 7. snapshot fidelity --------------------------------------------------------

def test_c7_snapshot_fidelity():
    cfg = make_short_cfg()
    times = sorted(np.random.default_rng(77).uniform(0.5, 239.5, 20))
    probe = Probe(times, cfg.hyperparams, cfg.scenario)
    simcore.simulate(cfg, "online", 9, controller=probe)
    ok = len(probe.checks) >= 20 and all(probe.checks)
    verdict(ok, "7 snapshot fidelity",
            f"{sum(probe.checks)}/{len(probe.checks)} vehicle observations equal element-wise at 20 instants")
    assert ok


# 8 / 9. Table I orderings at full scale -----------------------------------------

METHODS = {
    "random": lambda cfg, s, on: run_random(cfg, s),
    "offline": lambda cfg, s, on: run_offline(cfg, s, weights=on.final_weights),
    "dt_k1": lambda cfg, s, on: run_dt(cfg, s, k=1, T_DT=500.0),
    "dt_k2": lambda cfg, s, on: run_dt(cfg, s, k=2, T_DT=500.0),
    "dt_k4": lambda cfg, s, on: run_dt(cfg, s, k=4, T_DT=500.0),
    "exploit_T250": lambda cfg, s, on: run_exploit(cfg, s, k=1, T_DT=250.0),
    "exploit_T500": lambda cfg, s, on: run_exploit(cfg, s, k=1, T_DT=500.0),
}


def _cache_key(cfg):
    h = hashlib.sha256()
    for p in sorted(Path(vectwin.__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    h.update(json.dumps(to_dict(cfg), sort_keys=True).encode())
    h.update(repr((SEEDS, sorted(METHODS))).encode())
    return h.hexdigest()[:20]


@pytest.fixture(scope="session")
def table(request):
    """{method: [summary per seed]} for the full default configuration."""
    cfg = RunConfig()
    cache_dir = request.config.cache.mkdir("vectwin_acceptance")
    path = cache_dir / f"table_{_cache_key(cfg)}.json"
    if path.exists():
        return json.loads(path.read_text())
    out = {m: [] for m in ["online", *METHODS]}
    t0 = time.perf_counter()
    for seed in SEEDS:
        online = run_online(copy.deepcopy(cfg), seed)
        out["online"].append(online.summary)
        for name, fn in METHODS.items():
            out[name].append(fn(copy.deepcopy(cfg), seed, online).summary)
        print(f"seed {seed} done after {time.perf_counter() - t0:.0f}s")
    path.write_text(json.dumps(out))
    return out


def med(table, method, phase, stat="mean"):
    return statistics.median(s[phase][stat] for s in table[method])


def test_c8a_random_vs_online(table):
    r, o = med(table, "random", 1), med(table, "online", 1)
    ok = r >= 3 * o
    verdict(ok, "8a Random P1 >= 3x Online P1", f"{r:.2f} vs {o:.2f} (ratio {r / o:.2f})")
    assert ok


def test_c8b_offline_vs_online(table):
    f, o = med(table, "offline", 2), med(table, "online", 2)
    ok = f >= 1.5 * o
    verdict(ok, "8b Offline P2 >= 1.5x Online P2", f"{f:.2f} vs {o:.2f} (ratio {f / o:.2f})")
    assert ok


def test_c8c_dt_tail_vs_online(table):
    d, o = med(table, "dt_k1", 2, "p99"), med(table, "online", 2, "p99")
    ok = d <= o
    verdict(ok, "8c DT k1 P2 P99 <= Online P2 P99", f"{d:.2f} vs {o:.2f}")
    assert ok


def test_c8d_dt_k2_vs_online(table):
    d, o = med(table, "dt_k2", 1), med(table, "online", 1)
    ok = d <= 0.8 * o
    verdict(ok, "8d DT k2 P1 <= 0.8x Online P1", f"{d:.2f} vs {o:.2f} (ratio {d / o:.2f})")
    assert ok


def test_c8e_exploit_budget(table):
    a, b = med(table, "exploit_T500", 2), med(table, "exploit_T250", 2)
    ok = a <= b
    verdict(ok, "8e Exploit T500 P2 <= Exploit T250 P2", f"{a:.2f} vs {b:.2f}")
    assert ok


def test_c8f_phase3_band(table):
    names = ["online", "exploit_T250", "exploit_T500", "dt_k1", "dt_k2", "dt_k4"]
    vals = {n: med(table, n, 3) for n in names}
    spread = max(vals.values()) / min(vals.values())
    ok = spread <= 2.0
    verdict(ok, "8f P3 means within 2x", f"max/min {spread:.2f}; "
            + ", ".join(f"{n} {v:.2f}" for n, v in vals.items()))
    assert ok


def test_c9_trigger_frequency(table):
    k4, k2 = med(table, "dt_k4", 1), med(table, "dt_k2", 1)
    ok = k4 >= k2
    line = f"k=4 P1 {k4:.2f} vs k=2 P1 {k2:.2f}"
    if ok:
        verdict(True, "9 k=4 not better than k=2 on P1", line)
    else:
        VERDICTS.append(f"WARN 9 k=4 not better than k=2 on P1: {line} (flagged, not a failure)")
        warnings.warn(f"trigger-frequency signal absent: {line}")
