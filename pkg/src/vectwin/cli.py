"""Command line entry point: ``run``, ``compare`` and ``emit-plots``."""
from __future__ import annotations

import argparse
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, MethodSpec, dumps, parse_config, validate, with_method
from .experiments import (ReportError, bar_rows, compare, load_artifacts, read_weight_bundle,
                          run_method, save_artifacts)

log = logging.getLogger("vectwin")


def build_parser():
    p = argparse.ArgumentParser(prog="vectwin", description="Vehicular offloading simulator with a digital twin.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one method over one or more seeds")
    r.add_argument("--config", help="JSON config file; defaults when omitted")
    r.add_argument("--method", choices=["random", "online", "offline", "exploit", "dt"])
    r.add_argument("--k", type=int, help="triggers per phase (exploit, dt)")
    r.add_argument("--t-dt", type=float, dest="t_dt", help="twin scenario length in seconds")
    r.add_argument("--multi", action="store_true", help="three chained twin scenarios per trigger")
    r.add_argument("--seed", type=int, action="append", help="repeatable; defaults to the config seeds")
    r.add_argument("--offline-weights", dest="offline_weights",
                   help="weight bundle for offline; '{seed}' is replaced by the seed")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--jobs", type=int, default=1, help="seeds run in parallel processes")

    c = sub.add_parser("compare", help="phase-wise table over saved runs")
    c.add_argument("--inputs", required=True, help="directory searched for saved runs")
    c.add_argument("--out", help="where to write the report (default: the inputs directory)")
    c.add_argument("--window", type=float, default=50.0, help="trajectory window in seconds")

    e = sub.add_parser("emit-plots", help="bar and trajectory CSVs for external plotting")
    e.add_argument("--inputs", required=True)
    e.add_argument("--out", help="default: the inputs directory")
    e.add_argument("--window", type=float, default=50.0)
    return p


def effective_config(args):
    cfg = parse_config(args.config)
    m = cfg.method
    spec = MethodSpec(
        kind=args.method or m.kind,
        k=m.k if args.k is None else args.k,
        T_DT=m.T_DT if args.t_dt is None else args.t_dt,
        multi_scenario=args.multi or m.multi_scenario,
        offline_weights_path=args.offline_weights or m.offline_weights_path,
    )
    cfg = with_method(cfg, spec)
    if args.seed:
        cfg.seeds = list(args.seed)
    cfg.output_dir = args.out
    return validate(cfg)


def _run_one(cfg, seed, out_dir):
    spec = cfg.method
    weights = None
    if spec.kind == "offline":
        path = spec.offline_weights_path.replace("{seed}", str(seed))
        weights = read_weight_bundle(path)
    art = run_method(cfg, spec, seed, offline_weights=weights)
    save_artifacts(art, out_dir, cfg.weight_format)
    return art.summary


def cmd_run(args):
    cfg = effective_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(dumps(cfg) + "\n")
    label = cfg.method.label
    jobs = {seed: out / label / f"seed_{seed}" for seed in cfg.seeds}
    failed = []
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = {seed: pool.submit(_run_one, cfg, seed, d) for seed, d in jobs.items()}
            results = {}
            for seed, fut in futures.items():
                try:
                    results[seed] = fut.result()
                except Exception:
                    results[seed] = traceback.format_exc()
    else:
        results = {}
        for seed, d in jobs.items():
            try:
                results[seed] = _run_one(cfg, seed, d)
            except Exception:
                results[seed] = traceback.format_exc()
    for seed, res in results.items():
        if isinstance(res, str):
            failed.append(seed)
            jobs[seed].mkdir(parents=True, exist_ok=True)
            (jobs[seed] / "FAILED").write_text(res)
            log.error("seed %s failed:\n%s", seed, res)
        else:
            means = ", ".join("-" if e["mean"] is None else f"{e['mean']:.3f}" for e in res)
            print(f"{label} seed {seed}: phase means [{means}] -> {jobs[seed]}")
    return 1 if failed else 0


def _collect(inputs):
    root = Path(inputs)
    dirs = sorted({p.parent for p in root.rglob("summary.json")})
    dirs = [d for d in dirs if not (d / "FAILED").exists() and (d / "records.csv").exists()]
    if not dirs:
        raise ReportError(f"no saved runs under {root}")
    return [load_artifacts(d) for d in dirs]


def cmd_compare(args):
    report = compare(_collect(args.inputs), args.window)
    out = Path(args.out or args.inputs)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    table = report.table()
    (out / "table.txt").write_text(table + "\n")
    (out / "trajectory.csv").write_text(report.timeseries_csv())
    print(table)
    return 0


def emit_plots_data(artifacts, out_dir, window=50.0):
    """Write ``bars.csv`` (method, phase, mean) and ``trajectory.csv``; returns both paths."""
    report = compare(artifacts, window)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["method,phase,mean_latency"]
    for method, phase, mean in bar_rows(report):
        lines.append(f"{method},{phase},{'' if mean is None else repr(mean)}")
    bars = out / "bars.csv"
    bars.write_text("\n".join(lines) + "\n")
    traj = out / "trajectory.csv"
    traj.write_text(report.timeseries_csv())
    return bars, traj


def cmd_emit_plots(args):
    bars, traj = emit_plots_data(_collect(args.inputs), args.out or args.inputs, args.window)
    print(f"wrote {bars} and {traj}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "compare": cmd_compare, "emit-plots": cmd_emit_plots}
    try:
        return handlers[args.command](args)
    except (ConfigError, ReportError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
