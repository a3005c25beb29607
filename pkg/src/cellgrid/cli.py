"""Command line interface.

Verbs: ``run`` (execute an experiment config), ``cells`` (clustering report
for a network file), ``compare`` (scenario comparison table and plots),
``serve`` (standalone TCP broker) and the internal ``client`` verb that
``run --spawn`` uses to start clients as separate OS processes.

Exit codes: 0 success, 2 configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import subprocess
import sys

from .bus import FAST, PACED
from .errors import CellgridError, ConfigError, GridFileError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _add_pacing_flags(p: argparse.ArgumentParser) -> None:
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--fast", action="store_true",
                      help="as-fast-as-possible stepping (default)")
    mode.add_argument("--paced", action="store_true",
                      help="pace steps against the wall clock")
    p.add_argument("--speedup", type=float, default=None,
                   help="wall-clock speedup factor in paced mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellgrid",
        description="co-simulation testbed for cell-based volt-var control")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--name", default="scenario", help="scenario name (results subdir)")
    p_run.add_argument("--out", default=None, help="results directory override")
    p_run.add_argument("--seed", type=int, default=None, help="master seed override")
    p_run.add_argument("--k", type=int, default=None, help="cell count override")
    p_run.add_argument("--spawn", action="store_true",
                       help="run clients as separate OS processes over TCP")
    p_run.add_argument("--port", type=int, default=0,
                       help="TCP port for --spawn (0 = ephemeral)")
    _add_pacing_flags(p_run)

    p_cells = sub.add_parser("cells", help="cell identification report")
    p_cells.add_argument("network")
    p_cells.add_argument("--k", type=int, required=True)
    p_cells.add_argument("--modified", action="store_true",
                         help="also report the length-modified variant")
    p_cells.add_argument("--out", default="cells_report")

    p_cmp = sub.add_parser("compare", help="compare completed scenario results")
    p_cmp.add_argument("results", nargs="+", help="result directories (first is the base)")
    p_cmp.add_argument("--out", default="comparison")

    p_serve = sub.add_parser("serve", help="standalone broker")
    p_serve.add_argument("--config", default=None,
                         help="experiment config supplying manifest and schedule")
    p_serve.add_argument("--port", type=int, default=None)
    p_serve.add_argument("--host", default="127.0.0.1")
    _add_pacing_flags(p_serve)

    p_client = sub.add_parser("client", help=argparse.SUPPRESS)
    p_client.add_argument("--role", required=True)
    p_client.add_argument("--config", required=True)
    p_client.add_argument("--port", type=int, required=True)
    p_client.add_argument("--host", default="127.0.0.1")
    p_client.add_argument("--out", default=None)
    p_client.add_argument("--seed", type=int, default=None)
    p_client.add_argument("--k", type=int, default=None)

    return parser


def _load_config(args, allow_overrides: bool = True):
    from .experiment import parse_experiment_config

    cfg = parse_experiment_config(args.config)
    if not allow_overrides:
        return cfg
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "k", None) is not None:
        updates["k_cells"] = args.k
        if args.k == 0:
            updates["clients"] = tuple(
                (n, m) for n, m in cfg.clients if n != "ppvc")
    if getattr(args, "paced", False):
        updates["pacing"] = PACED
    if getattr(args, "fast", False):
        updates["pacing"] = FAST
    if getattr(args, "speedup", None) is not None:
        updates["speedup"] = args.speedup
    if getattr(args, "out", None) is not None:
        updates["out_dir"] = args.out
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
        cfg.validate()
    return cfg


def cmd_run(args) -> int:
    from .experiment import run_experiment
    cfg = _load_config(args)
    if args.spawn:
        return _run_spawn(args, cfg)
    result = run_experiment(cfg, name=args.name)
    print(f"{result.name}: {result.status}  steps={result.steps}  "
          f"losses={result.cumulative_mwh:.6f} MWh  "
          f"violations={result.total_violations}  out={result.out_dir}")
    if result.status != "completed":
        print(f"  diagnostic: {result.diagnostic}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _run_spawn(args, cfg) -> int:
    """Broker in this process, every client in its own OS process."""
    from .clients import RecordStore
    from .clustering import cell_pipeline
    from .experiment import (_losses_csv, _result_from_store, parse_network,
                             serialize_config, write_partition_csv)
    from .tcpbus import TcpBroker

    out_dir = os.path.join(cfg.out_dir, args.name)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_snapshot.cfg"), "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
    if cfg.k_cells >= 1:
        net = parse_network(cfg.resolve(cfg.network))
        _d, partition, _s = cell_pipeline(net, cfg.k_cells)
        partition.validate_for_ppvc()
        write_partition_csv(partition, os.path.join(out_dir, "partition.csv"))

    broker = TcpBroker(cfg.manifest(), cfg.schedule(), port=args.port)
    broker.start()
    log.info("broker on port %d", broker.port)
    procs = []
    for name, _mode in cfg.clients:
        argv = [sys.executable, "-m", "cellgrid.cli", "client", "--role", name,
                "--config", args.config, "--port", str(broker.port),
                "--out", out_dir]
        if args.seed is not None:
            argv += ["--seed", str(args.seed)]
        if args.k is not None:
            argv += ["--k", str(args.k)]
        procs.append(subprocess.Popen(argv))
    try:
        horizon = max(60.0, cfg.steps * 0.5)
        if cfg.pacing == PACED:
            horizon += cfg.steps * cfg.step_seconds / cfg.speedup
        finished = broker.wait(timeout=horizon)
        for proc in procs:
            proc.wait(timeout=30)
    finally:
        broker.stop()
    broker.core.event_log.save(os.path.join(out_dir, "broker_log.jsonl"))
    if not finished:
        print("experiment timed out", file=sys.stderr)
        return EXIT_RUNTIME

    store = RecordStore.load_csv(os.path.join(out_dir, "recorder.csv"))
    status = "completed" if not broker.core.aborted else "failed"
    result = _result_from_store(cfg, args.name, store, status,
                                broker.core.abort_reason or "", out_dir, 0.0)
    _losses_csv(result)
    result.save()
    print(f"{result.name}: {result.status}  losses={result.cumulative_mwh:.6f} MWh  "
          f"out={out_dir}")
    return EXIT_OK if result.status == "completed" else EXIT_RUNTIME


def cmd_client(args) -> int:
    """Internal: one roster client connected over TCP (used by run --spawn)."""
    from .clients import RecorderClient
    from .experiment import build_clients
    from .tcpbus import run_tcp_client

    cfg = _load_config(args)
    _net, _partition, clients = build_clients(cfg)
    client = next((c for c in clients if c.name == args.role), None)
    if client is None:
        print(f"role {args.role!r} not in roster", file=sys.stderr)
        return EXIT_CONFIG
    run_tcp_client(client, host=args.host, port=args.port)
    if isinstance(client, RecorderClient) and args.out:
        client.export_csv(os.path.join(args.out, "recorder.csv"))
    return EXIT_OK


def cmd_cells(args) -> int:
    from .experiment import cells_report

    report = cells_report(args.network, args.k, args.modified, args.out)
    for label, part in sorted(report.items()):
        partition = part["partition"]
        print(f"[{label}] {partition.k} cells")
        for cell, buses in partition.cells().items():
            devices = ", ".join(partition.device_roster.get(cell, ())) or "-"
            print(f"  cell {cell}: {' '.join(buses)}  (devices: {devices})")
        print(f"  heatmap: {part['heatmap'][0]}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .experiment import (ScenarioResult, compare_scenarios, losses_plot,
                             write_comparison)

    results = [ScenarioResult.load(d) for d in args.results]
    rows = compare_scenarios(results)
    csv_path, _img = write_comparison(rows, args.out)
    losses_plot(results, args.out)
    width = max(len(r["name"]) for r in rows)
    print(f"{'scenario':<{width}}  K  cumulative_MWh  normalized  violations")
    for r in rows:
        print(f"{r['name']:<{width}}  {r['k_cells']}  {r['cumulative_mwh']:<14.6f}  "
              f"{r['normalized']:<10.4f}  {r['violations']}")
    print(f"table: {csv_path}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .bus import DEFAULT_PORT, Manifest, Schedule
    from .experiment import parse_experiment_config
    from .tcpbus import TcpBroker

    if args.config:
        cfg = parse_experiment_config(args.config)
        if args.paced:
            cfg = dataclasses.replace(cfg, pacing=PACED)
        if args.fast:
            cfg = dataclasses.replace(cfg, pacing=FAST)
        if args.speedup is not None:
            cfg = dataclasses.replace(cfg, speedup=args.speedup)
        manifest, schedule = cfg.manifest(), cfg.schedule()
    else:
        manifest = Manifest(clients={}, strict=False)
        schedule = Schedule(steps=1, step_seconds=60.0,
                            pacing=PACED if args.paced else FAST,
                            speedup=args.speedup or 1.0)
    port = args.port if args.port is not None else DEFAULT_PORT
    broker = TcpBroker(manifest, schedule, host=args.host, port=port)
    broker.start()
    print(f"broker listening on {args.host}:{broker.port}")
    try:
        broker.wait()
    except KeyboardInterrupt:
        pass
    finally:
        broker.stop()
    return EXIT_OK if not broker.core.aborted else EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    handlers = {
        "run": cmd_run,
        "cells": cmd_cells,
        "compare": cmd_compare,
        "serve": cmd_serve,
        "client": cmd_client,
    }
    try:
        return handlers[args.verb](args)
    except (ConfigError, GridFileError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CellgridError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
