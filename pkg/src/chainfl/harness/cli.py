"""Command line entry point.

Exit codes: 0 on success, 2 on a configuration or usage error, 1 when a run
fails at runtime.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from ..errors import ChainFLError, ConfigError
from .config import ScenarioConfig, load_config
from .metrics import HEADER
from .runner import run_chainfl, run_scenario

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _value(token: str):
    try:
        return json.loads(token)
    except json.JSONDecodeError:
        return token


def parse_grid(items) -> list:
    """``["M_d=0,0.1", "paradigm=FedAvg,AsynFL"]`` -> ``[("M_d", [0, 0.1]), ...]``."""
    grid = []
    for item in items or []:
        key, sep, values = item.partition("=")
        if not sep or not key or not values:
            raise ConfigError([f"grid: expected NAME=V1,V2,... got {item!r}"])
        grid.append((key, [_value(v) for v in values.split(",")]))
    return grid


def _override(cfg: ScenarioConfig, seed=None, paradigm=None) -> ScenarioConfig:
    changes = {}
    if seed is not None:
        changes["seed"] = seed
    if paradigm is not None:
        changes["paradigm"] = paradigm
    return cfg.with_(**changes) if changes else cfg


def _label(point: dict) -> str:
    return "_".join(f"{k}={v}" for k, v in point.items())


def _run_point(cfg_dict: dict, out_dir: str):
    cfg = ScenarioConfig.from_dict(cfg_dict)
    result = run_scenario(cfg)
    result.write(out_dir)
    return result.rows[-1] if result.rows else None


def cmd_run(args) -> int:
    cfg = _override(load_config(args.config), args.seed, args.paradigm)
    result = run_scenario(cfg)
    paths = result.write(args.out)
    last = result.rows[-1]
    print(f"{cfg.paradigm} seed={cfg.seed} epochs={last.global_epoch} gradients={last.gradients} "
          f"{last.metric_kind}={last.metric_value:.6g} -> {paths['metrics']}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = load_config(args.config)
    grid = parse_grid(args.grid)
    keys = [k for k, _ in grid]
    points, configs = [], []
    for combo in itertools.product(*[vals for _, vals in grid]):
        point = dict(zip(keys, combo))
        d = base.to_dict()
        d.update(point)
        configs.append(ScenarioConfig.from_dict(d).to_dict())  # fail fast on bad values
        points.append(point)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dirs = [str(out / (_label(p) or "base")) for p in points]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            finals = list(pool.map(_run_point, configs, dirs))
    else:
        finals = [_run_point(c, d) for c, d in zip(configs, dirs)]
    for point, d in zip(points, dirs):
        name = f"metrics_{_label(point) or 'base'}.csv"
        (out / name).write_bytes((Path(d) / "metrics.csv").read_bytes())
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys + list(HEADER))
        for point, row in zip(points, finals):
            vals = [] if row is None else [row.paradigm, row.seed, row.global_epoch, row.gradients,
                                           repr(row.sim_time), row.metric_kind, repr(row.metric_value),
                                           repr(row.loss)]
            w.writerow([point[k] for k in keys] + vals)
    print(f"{len(points)} scenarios -> {out}")
    return EXIT_OK


def cmd_export_dag(args) -> int:
    cfg = _override(load_config(args.config), args.seed, "ChainFL")
    result = run_chainfl(cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    result.ledger.export(args.out)
    print(f"{len(result.ledger.vertices)} vertices -> {args.out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    load_config(args.config)
    print("ok")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chainfl", description="Sharded blockchain federated learning simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", default="out")
    run.add_argument("--paradigm", choices=["ChainFL", "FedAvg", "AsynFL"])
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="run a grid of scenarios")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--grid", action="append", metavar="NAME=V1,V2", help="repeat for a multi-axis grid")
    sweep.add_argument("--out", default="sweep")
    sweep.add_argument("--workers", type=int, default=1)
    sweep.set_defaults(func=cmd_sweep)

    dag = sub.add_parser("export-dag", help="run ChainFL and write the DAG vertex file")
    dag.add_argument("--config", required=True)
    dag.add_argument("--seed", type=int)
    dag.add_argument("--out", default="dag.jsonl")
    dag.set_defaults(func=cmd_export_dag)

    val = sub.add_parser("validate-config", help="check a scenario file")
    val.add_argument("config")
    val.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ChainFLError, ArithmeticError, OSError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
