import copy
import csv
import json
import math

import pytest

from conftest import make_short_cfg
from vectwin import cli
from vectwin.config import (ConfigError, MethodSpec, RunConfig, default_degraded_servers, default_phases,
                            default_server_tiers, dumps, from_dict, parse_config, to_dict, with_method)
from vectwin.experiments import (ReportError, compare, load_artifacts, read_weight_bundle, run_offline,
                                 run_online, run_random, save_artifacts, table_one_methods, windowed_means)
from vectwin.learner import param_hash


# config

def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("")
    cfg = parse_config(p)
    assert to_dict(cfg) == to_dict(RunConfig())
    ph = cfg.scenario.phases
    assert [(x.start_time, x.end_time, x.vehicle_count) for x in ph] == [
        (0.0, 500.0, 45), (500.0, 1500.0, 65), (1500.0, 2500.0, 65), (2500.0, 3500.0, 65)]
    assert ph[0].arrival_rate_lambda == 1 / 8 and ph[2].arrival_rate_lambda == pytest.approx(0.15)
    assert cfg.hyperparams.hidden == (64, 64) and cfg.dt.pt_speedup_factor == 25.0


def test_missing_file_and_bad_json(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.json")
    p = tmp_path / "bad.json"
    p.write_text("{oops")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(p)


def test_bad_weights_name_the_key():
    d = to_dict(RunConfig())
    d["scenario"]["phases"][1]["task_type_weights"] = [0.5, 0.5, 0.5, 0, 0, 0]
    with pytest.raises(ConfigError, match=r"scenario\.phases\[1\]\.task_type_weights"):
        from_dict(d)


def test_unknown_key_rejected_with_path():
    with pytest.raises(ConfigError, match=r"hyperparams\.learning_rat"):
        from_dict({"hyperparams": {"learning_rat": 0.1}})
    with pytest.raises(ConfigError, match=r"^bogus"):
        from_dict({"bogus": 1})


def test_inconsistent_phases_rejected():
    d = to_dict(RunConfig())
    d["scenario"]["phases"][2]["start_time"] = 1400.0
    with pytest.raises(ConfigError, match=r"phases\[2\]\.start_time"):
        from_dict(d)


def test_round_trip():
    cfg = make_short_cfg()
    cfg.hyperparams.learning_rate = 2e-3
    again = from_dict(json.loads(dumps(cfg)))
    assert to_dict(again) == to_dict(cfg)
    assert dumps(again) == dumps(cfg)


def test_server_layout():
    tiers = default_server_tiers()
    assert tiers.count("server_low") == 4 and tiers.count("server_mid") == 4 and tiers.count("server_high") == 8
    degraded = default_degraded_servers(tiers)
    assert len(degraded) == 8
    picked = [tiers[i] for i in degraded]
    assert picked.count("server_high") == 4 and picked.count("server_mid") == 2 and picked.count("server_low") == 2


def test_method_labels_and_matrix():
    labels = [m.label for m in table_one_methods()]
    assert labels == ["random", "online", "offline", "exploit_k1_T250", "exploit_k1_T500",
                      "dt_single_k1_T500", "dt_single_k2_T500", "dt_single_k4_T500",
                      "dt_multi_k1_T500", "dt_multi_k2_T500"]
    cfg = with_method(RunConfig(), MethodSpec("dt", k=2, T_DT=250.0, multi_scenario=True))
    assert cfg.dt.scenario_count == 3 and cfg.dt.T_DT == 250.0


def test_offline_requires_weights_path():
    with pytest.raises(ConfigError, match="offline_weights_path"):
        from_dict({"method": {"kind": "offline"}})


# experiments

@pytest.fixture(scope="module")
def short_runs():
    cfg = make_short_cfg()
    return cfg, run_random(copy.deepcopy(cfg), 0), run_online(copy.deepcopy(cfg), 0)


def test_random_action_histogram():
    cfg = make_short_cfg(seg=300.0, m0=20, m1=20, lam=0.5)
    art = run_random(cfg, 1)
    n = len(art.records)
    assert n >= 10000
    counts = [0] * 17
    for r in art.records:
        counts[r.action] += 1
    assert all(abs(c / n - 1 / 17) < 0.01 for c in counts)
    assert art.final_weights == {}


def test_offline_frozen(short_runs, tmp_path):
    cfg, _, online = short_runs
    save_artifacts(online, tmp_path / "on")
    bundle = read_weight_bundle(tmp_path / "on" / "weights.json")
    assert bundle == online.final_weights
    off = run_offline(copy.deepcopy(cfg), 0, weights_path=str(tmp_path / "on" / "weights.json"))
    assert off.train_steps == 0
    # every vehicle, late joiners included, ends the run holding exactly its deployed weights
    assert off.final_weights == bundle


def test_offline_missing_or_corrupt_weights(short_runs, tmp_path):
    cfg = short_runs[0]
    with pytest.raises(FileNotFoundError):
        run_offline(copy.deepcopy(cfg), 0, weights_path=str(tmp_path / "none.json"))
    bad = tmp_path / "bad.json"
    bad.write_text('{"version": 1, "agents": {"0": "AAAA"}}')
    with pytest.raises(ValueError):
        run_offline(copy.deepcopy(cfg), 0, weights_path=str(bad))


def test_compare_layout(short_runs):
    cfg, rnd, onl = short_runs
    rep = compare([rnd])
    assert len(rep.medians) == 1 and len(rep.columns) == 12
    rep2 = compare([onl, onl])
    assert rep2.rows[0]["cells"] == rep2.rows[1]["cells"]
    rep3 = compare([rnd, onl])
    assert [m["method"] for m in rep3.medians] == ["random", "online"]
    assert "random" in rep3.table() and len(rep3.table().splitlines()) == 4
    other = copy.deepcopy(onl)
    other.phases = make_short_cfg(seg=30.0).scenario.phases
    with pytest.raises(ReportError):
        compare([onl, other])


def test_windowed_means_count(short_runs):
    _, rnd, _ = short_runs
    assert len(windowed_means(rnd.records, 240.0, 50.0)) == math.ceil(240 / 50)


def test_save_load_round_trip(short_runs, tmp_path):
    _, _, onl = short_runs
    save_artifacts(onl, tmp_path / "x", weight_format="json")
    back = load_artifacts(tmp_path / "x")
    assert back.records == onl.records and back.summary == onl.summary and back.method == "online"


# cli

def _write_cfg(tmp_path, cfg):
    p = tmp_path / "cfg.json"
    p.write_text(dumps(cfg))
    return p


def test_cli_run_compare_emit(tmp_path, capsys):
    cfg = make_short_cfg()
    cpath = _write_cfg(tmp_path, cfg)
    out = tmp_path / "runs"
    assert cli.main(["run", "--config", str(cpath), "--method", "online", "--seed", "1", "--out", str(out)]) == 0
    run_dir = out / "online" / "seed_1"
    assert (run_dir / "records.csv").exists() and (run_dir / "summary.json").exists()
    summary = json.loads((run_dir / "summary.json").read_text())
    assert [e["phase"] for e in summary["online"]] == ["warmup", "phase1", "phase2", "phase3"]
    echoed = parse_config(out / "effective_config.json")
    assert echoed.method.kind == "online" and echoed.seeds == [1]

    # the echoed config reproduces the run exactly
    out2 = tmp_path / "again"
    assert cli.main(["run", "--config", str(out / "effective_config.json"), "--out", str(out2)]) == 0
    assert (out2 / "online" / "seed_1" / "records.csv").read_text() == (run_dir / "records.csv").read_text()

    assert cli.main(["run", "--config", str(cpath), "--method", "dt", "--k", "2", "--t-dt", "10",
                     "--multi", "--seed", "1", "--seed", "2", "--out", str(out)]) == 0
    assert (out / "dt_multi_k2_T10" / "seed_2" / "summary.json").exists()
    meta = json.loads((out / "dt_multi_k2_T10" / "seed_1" / "summary.json").read_text())["meta"]
    assert meta["triggers"] == 6 and meta["twin_scenarios"] == 18

    capsys.readouterr()
    assert cli.main(["compare", "--inputs", str(out)]) == 0
    table = capsys.readouterr().out
    assert "online" in table and "dt_multi_k2_T10" in table
    assert (out / "report.json").exists()

    assert cli.main(["emit-plots", "--inputs", str(out), "--out", str(tmp_path / "plots")]) == 0
    bars = list(csv.reader((tmp_path / "plots" / "bars.csv").open()))
    assert bars[0] == ["method", "phase", "mean_latency"] and len(bars) == 1 + 2 * 4
    assert [b[0] for b in bars[1:]] == ["dt_multi_k2_T10"] * 4 + ["online"] * 4
    traj = list(csv.reader((tmp_path / "plots" / "trajectory.csv").open()))
    assert len(traj) == 1 + 2 * math.ceil(240 / 50)


def test_cli_offline_uses_seed_template(tmp_path):
    cfg = make_short_cfg()
    cpath = _write_cfg(tmp_path, cfg)
    out = tmp_path / "runs"
    assert cli.main(["run", "--config", str(cpath), "--method", "online", "--seed", "3", "--out", str(out)]) == 0
    tmpl = str(out / "online" / "seed_{seed}" / "weights.json")
    assert cli.main(["run", "--config", str(cpath), "--method", "offline", "--offline-weights", tmpl,
                     "--seed", "3", "--out", str(out)]) == 0
    assert (out / "offline" / "seed_3" / "records.csv").exists()


def test_cli_errors(tmp_path):
    out = tmp_path / "runs"
    assert cli.main(["run", "--config", str(tmp_path / "missing.json"), "--out", str(out)]) != 0
    assert cli.main(["run", "--method", "offline", "--seed", "0", "--out", str(out)]) != 0
    cfg = make_short_cfg()
    cpath = _write_cfg(tmp_path, cfg)
    rc = cli.main(["run", "--config", str(cpath), "--method", "offline",
                   "--offline-weights", str(tmp_path / "none.json"), "--seed", "0", "--out", str(out)])
    assert rc == 1
    assert (out / "offline" / "seed_0" / "FAILED").exists()
    assert cli.main(["compare", "--inputs", str(tmp_path / "empty")]) != 0
    with pytest.raises(SystemExit):
        cli.main(["run", "--method", "online"])  # --out is required
