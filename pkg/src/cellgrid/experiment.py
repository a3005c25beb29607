"""Experiment configuration, orchestration and scenario comparison.

A run wires the grid, converter, dispatcher and recorder clients onto the
bus, executes the schedule, and leaves a results directory behind:
``recorder.csv`` (everything published), ``losses.csv`` (per-step summary),
``result.json``, ``config_snapshot.cfg``, ``broker_log.jsonl`` and, for
K >= 1, ``partition.csv``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .bus import FAST, FREE, PACED, STEPPED, InProcBus, Manifest, Schedule
from .clients import (ConverterClient, DroopCurve, GridClient, PpvcClient,
                      RecorderClient, RecordStore, default_droop_curve)
from .clustering import CellPartition, cell_pipeline, export_heatmap
from .dispatch import DeParams
from .errors import CellgridError, ConfigError, GridFileError
from .netfile import parse_network, read_sections
from .netmodel import modify_line_length, to_per_unit
from .profiles import parse_profile

log = logging.getLogger(__name__)

CONFIG_FORMAT = "1"

# the published length-modification scenario: (line id, new km)
LINE_MODS = (("line1", 0.8), ("line2", 1.4), ("line12", 6.3))


def builtin_path(name: str) -> str:
    """Filesystem path of a bundled data file."""
    return str(resources.files("cellgrid").joinpath("data", name))


@dataclass(frozen=True)
class ExperimentConfig:
    network: str = "builtin:cigre_mv_14.net"
    load_profile: str = "builtin:load_day.csv"
    irradiance_profile: str = "builtin:irradiance_day.csv"
    steps: int = 1440
    step_seconds: float = 60.0
    pacing: str = FAST
    speedup: float = 60.0
    k_cells: int = 3
    cadence: int = 15
    seed: int = 42
    v_lo: float = 0.95
    v_hi: float = 1.05
    penalty_weight: float = 1e4
    converter_node: str = "node21"
    converter_device: str = "pv09"
    converter_rated_kva: float = 250.0
    converter_q_max_kvar: float = 120.0
    converter_dc_kw: float = 200.0
    on_pf_failure: str = "abort"
    out_dir: str = "results"
    de: DeParams = field(default_factory=lambda: DeParams(
        population=20, mutation=0.7, crossover=0.9, max_generations=30,
        tolerance=1e-7, seed=1))
    droop: DroopCurve = field(default_factory=default_droop_curve)
    clients: tuple[tuple[str, str], ...] = (
        ("grid", STEPPED), ("converter", STEPPED), ("ppvc", FREE), ("recorder", FREE))
    base_dir: str = "."

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.step_seconds <= 0:
            raise ConfigError("step_seconds must be > 0")
        if self.pacing not in (FAST, PACED):
            raise ConfigError(f"pacing must be fast or paced, got {self.pacing!r}")
        if self.k_cells < 0:
            raise ConfigError("k_cells must be >= 0")
        if self.cadence < 1:
            raise ConfigError("cadence must be >= 1")
        names = [n for n, _ in self.clients]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate client name in roster")
        if "grid" not in names:
            raise ConfigError("client roster must include the grid client")
        if self.k_cells >= 1 and "ppvc" not in names:
            raise ConfigError("k_cells >= 1 needs the ppvc client in the roster")
        if self.k_cells == 0 and "ppvc" in names:
            raise ConfigError("k_cells = 0 (base case) must not include the ppvc client")
        for _, mode in self.clients:
            if mode not in (STEPPED, FREE):
                raise ConfigError(f"unknown client mode {mode!r}")
        self.de.validate()
        self.droop.validate()
        if not self.v_lo < self.v_hi:
            raise ConfigError("voltage band is empty")

    def resolve(self, path: str) -> str:
        if path.startswith("builtin:"):
            return builtin_path(path.split(":", 1)[1])
        if os.path.isabs(path):
            return path
        return os.path.join(self.base_dir, path)

    def schedule(self) -> Schedule:
        return Schedule(steps=self.steps, step_seconds=self.step_seconds,
                        pacing=self.pacing, speedup=self.speedup)

    def manifest(self) -> Manifest:
        return Manifest(clients=dict(self.clients), strict=True)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical text form; also what gets hashed into the result."""
    params = {
        "network": cfg.network,
        "load_profile": cfg.load_profile,
        "irradiance_profile": cfg.irradiance_profile,
        "steps": cfg.steps,
        "step_seconds": cfg.step_seconds,
        "pacing": cfg.pacing,
        "speedup": cfg.speedup,
        "k_cells": cfg.k_cells,
        "cadence": cfg.cadence,
        "seed": cfg.seed,
        "v_lo": cfg.v_lo,
        "v_hi": cfg.v_hi,
        "penalty_weight": cfg.penalty_weight,
        "converter_node": cfg.converter_node,
        "converter_device": cfg.converter_device,
        "converter_rated_kva": cfg.converter_rated_kva,
        "converter_q_max_kvar": cfg.converter_q_max_kvar,
        "converter_dc_kw": cfg.converter_dc_kw,
        "on_pf_failure": cfg.on_pf_failure,
        "out_dir": cfg.out_dir,
        "de_population": cfg.de.population,
        "de_mutation": cfg.de.mutation,
        "de_crossover": cfg.de.crossover,
        "de_max_generations": cfg.de.max_generations,
        "de_tolerance": cfg.de.tolerance,
    }
    lines = ["[meta]", "key,value", f"format,{CONFIG_FORMAT}", "", "[params]", "key,value"]
    for k in sorted(params):
        lines.append(f"{k},{params[k]}")
    lines += ["", "[clients]", "name,mode"]
    for name, mode in cfg.clients:
        lines.append(f"{name},{mode}")
    lines += ["", "[droop]", "u_pu,q_frac"]
    for u, f in cfg.droop.knots:
        lines.append(f"{u!r},{f!r}")
    lines += ["", "[deadband]", "u_lo,u_hi",
              f"{cfg.droop.deadband[0]!r},{cfg.droop.deadband[1]!r}", ""]
    return "\n".join(lines)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()


def parse_experiment_config(path: str | os.PathLike) -> ExperimentConfig:
    path = str(path)
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        sections = read_sections(text, path)
    except GridFileError as exc:
        raise ConfigError(str(exc)) from None
    meta = {r.get("key"): r.get("value") for r in sections.get("meta", [])}
    if meta.get("format") != CONFIG_FORMAT:
        raise ConfigError(f"{path}: missing or unsupported config format "
                          f"(need format={CONFIG_FORMAT} in [meta])")
    params = {r.get("key"): r.get("value") for r in sections.get("params", [])}

    defaults = ExperimentConfig()

    def get(key, conv, default):
        if key not in params:
            return default
        try:
            return conv(params[key])
        except ValueError:
            raise ConfigError(f"{path}: bad value {params[key]!r} for {key}") from None

    clients = defaults.clients
    if "clients" in sections:
        clients = tuple((r.get("name"), r.get("mode")) for r in sections["clients"])

    droop = defaults.droop
    if "droop" in sections:
        knots = tuple((float(r.get("u_pu")), float(r.get("q_frac")))
                      for r in sections["droop"])
        if "deadband" in sections and sections["deadband"]:
            r = sections["deadband"][0]
            deadband = (float(r.get("u_lo")), float(r.get("u_hi")))
        else:
            zero = [u for u, f in knots if f == 0.0]
            if len(zero) < 2:
                raise ConfigError(f"{path}: droop curve needs two zero knots")
            deadband = (min(zero), max(zero))
        droop = DroopCurve(knots=knots, deadband=deadband)

    de = DeParams(
        population=get("de_population", int, defaults.de.population),
        mutation=get("de_mutation", float, defaults.de.mutation),
        crossover=get("de_crossover", float, defaults.de.crossover),
        max_generations=get("de_max_generations", int, defaults.de.max_generations),
        tolerance=get("de_tolerance", float, defaults.de.tolerance),
        seed=1)

    cfg = ExperimentConfig(
        network=get("network", str, defaults.network),
        load_profile=get("load_profile", str, defaults.load_profile),
        irradiance_profile=get("irradiance_profile", str, defaults.irradiance_profile),
        steps=get("steps", int, defaults.steps),
        step_seconds=get("step_seconds", float, defaults.step_seconds),
        pacing=get("pacing", str, defaults.pacing),
        speedup=get("speedup", float, defaults.speedup),
        k_cells=get("k_cells", int, defaults.k_cells),
        cadence=get("cadence", int, defaults.cadence),
        seed=get("seed", int, defaults.seed),
        v_lo=get("v_lo", float, defaults.v_lo),
        v_hi=get("v_hi", float, defaults.v_hi),
        penalty_weight=get("penalty_weight", float, defaults.penalty_weight),
        converter_node=get("converter_node", str, defaults.converter_node),
        converter_device=get("converter_device", str, defaults.converter_device),
        converter_rated_kva=get("converter_rated_kva", float, defaults.converter_rated_kva),
        converter_q_max_kvar=get("converter_q_max_kvar", float,
                                 defaults.converter_q_max_kvar),
        converter_dc_kw=get("converter_dc_kw", float, defaults.converter_dc_kw),
        on_pf_failure=get("on_pf_failure", str, defaults.on_pf_failure),
        out_dir=get("out_dir", str, defaults.out_dir),
        de=de, droop=droop, clients=clients,
        base_dir=os.path.dirname(os.path.abspath(path)) or ".")
    try:
        cfg.validate()
    except (ConfigError, CellgridError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return cfg


# --------------------------------------------------------------------------
# results
# --------------------------------------------------------------------------

@dataclass
class ScenarioResult:
    name: str
    status: str                    # completed | failed
    diagnostic: str
    k_cells: int
    seed: int
    steps: int
    step_seconds: float
    network: str
    load_profile: str
    irradiance_profile: str
    config_hash: str
    losses_mw: list[float]
    vmin: list[float]
    vmax: list[float]
    violations: list[int]
    cumulative_mwh: float
    total_violations: int
    out_dir: str
    recorder_csv: str
    wall_seconds: float

    def schedule_key(self) -> tuple:
        return (self.steps, self.step_seconds, self.network,
                self.load_profile, self.irradiance_profile)

    def save(self) -> str:
        path = os.path.join(self.out_dir, "result.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
        return path

    @staticmethod
    def load(out_dir: str) -> "ScenarioResult":
        with open(os.path.join(out_dir, "result.json"), "r", encoding="utf-8") as fh:
            d = json.load(fh)
        d["out_dir"] = out_dir
        return ScenarioResult(**d)


def write_partition_csv(partition: CellPartition, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bus", "cell"])
        for bus in sorted(partition.assignment):
            writer.writerow([bus, partition.assignment[bus]])
        writer.writerow([])
        writer.writerow(["cell", "devices"])
        for cell in range(1, partition.k + 1):
            writer.writerow([cell, " ".join(partition.device_roster.get(cell, ()))])


def _losses_csv(result: ScenarioResult) -> None:
    path = os.path.join(result.out_dir, "losses.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "losses_mw", "vmin", "vmax", "violations"])
        for i in range(len(result.losses_mw)):
            writer.writerow([i + 1, f"{result.losses_mw[i]:.9g}",
                             f"{result.vmin[i]:.9g}", f"{result.vmax[i]:.9g}",
                             result.violations[i]])


def build_clients(cfg: ExperimentConfig):
    """Instantiate the client objects named in the roster."""
    net = parse_network(cfg.resolve(cfg.network))
    pun = to_per_unit(net)
    load_p = parse_profile(cfg.resolve(cfg.load_profile))
    irr_p = parse_profile(cfg.resolve(cfg.irradiance_profile))
    for p in (load_p, irr_p):
        if len(p) < cfg.steps:
            raise ConfigError(f"profile {p.name!r} has {len(p)} steps, "
                              f"schedule needs {cfg.steps}")

    partition = None
    if cfg.k_cells >= 1:
        _d_norm, partition, _sol = cell_pipeline(net, cfg.k_cells)
        partition.validate_for_ppvc()

    roster = dict(cfg.clients)
    clients = []
    for name, mode in cfg.clients:
        if name == "grid":
            clients.append(GridClient(
                pun, load_p, irr_p,
                converter_node=cfg.converter_node if "converter" in roster else None,
                converter_device=cfg.converter_device if "converter" in roster else None,
                band=(cfg.v_lo, cfg.v_hi), on_failure=cfg.on_pf_failure))
        elif name == "converter":
            clients.append(ConverterClient(
                cfg.converter_node, cfg.converter_rated_kva, cfg.converter_q_max_kvar,
                cfg.converter_dc_kw, irr_p, cfg.droop))
        elif name == "ppvc":
            clients.append(PpvcClient(
                pun, partition, cfg.de, load_p, irr_p, band=(cfg.v_lo, cfg.v_hi),
                penalty_weight=cfg.penalty_weight, cadence=cfg.cadence,
                master_seed=cfg.seed,
                converter_node=cfg.converter_node if "converter" in roster else None,
                converter_device=cfg.converter_device if "converter" in roster else None))
        elif name == "recorder":
            clients.append(RecorderClient())
        else:
            raise ConfigError(f"unknown client {name!r} in roster")
        if clients[-1].mode != mode:
            raise ConfigError(f"client {name!r} is {clients[-1].mode}, roster says {mode}")
    return net, partition, clients


def _result_from_store(cfg: ExperimentConfig, name: str, store: RecordStore,
                       status: str, diagnostic: str, out_dir: str,
                       wall: float) -> ScenarioResult:
    steps_l, losses = store.series("signal/grid/losses_mw")
    _s, vmin = store.series("signal/grid/vmin")
    _s, vmax = store.series("signal/grid/vmax")
    _s, viol = store.series("signal/grid/violations")
    if status == "completed" and len(losses) != cfg.steps:
        status = "failed"
        diagnostic = diagnostic or (f"loss series has {len(losses)} entries, "
                                    f"schedule had {cfg.steps} steps")
    cumulative = float(np.sum(losses) * cfg.step_seconds / 3600.0)
    return ScenarioResult(
        name=name, status=status, diagnostic=diagnostic, k_cells=cfg.k_cells,
        seed=cfg.seed, steps=cfg.steps, step_seconds=cfg.step_seconds,
        network=cfg.network, load_profile=cfg.load_profile,
        irradiance_profile=cfg.irradiance_profile, config_hash=config_hash(cfg),
        losses_mw=[float(x) for x in losses], vmin=[float(x) for x in vmin],
        vmax=[float(x) for x in vmax], violations=[int(x) for x in viol],
        cumulative_mwh=cumulative, total_violations=int(np.sum(viol)),
        out_dir=out_dir, recorder_csv=os.path.join(out_dir, "recorder.csv"),
        wall_seconds=wall)


def run_experiment(cfg: ExperimentConfig, name: str = "scenario",
                   out_dir: str | None = None) -> ScenarioResult:
    """In-process run; deterministic in fast mode for a fixed config+seed."""
    cfg.validate()
    out_dir = out_dir or os.path.join(cfg.out_dir, name)
    os.makedirs(out_dir, exist_ok=True)
    net, partition, clients = build_clients(cfg)
    if partition is not None:
        write_partition_csv(partition, os.path.join(out_dir, "partition.csv"))
    with open(os.path.join(out_dir, "config_snapshot.cfg"), "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))

    bus = InProcBus(cfg.manifest(), cfg.schedule())
    for client in clients:
        bus.add_client(client)
    t0 = time.monotonic()
    bus.run()
    wall = time.monotonic() - t0

    recorder = next((c for c in clients if isinstance(c, RecorderClient)), None)
    store = recorder.store if recorder is not None else RecordStore()
    store.export_csv(os.path.join(out_dir, "recorder.csv"))
    bus.core.event_log.save(os.path.join(out_dir, "broker_log.jsonl"))

    status = "completed" if not bus.core.aborted else "failed"
    result = _result_from_store(cfg, name, store, status,
                                bus.core.abort_reason or "", out_dir, wall)
    _losses_csv(result)
    result.save()
    return result


# --------------------------------------------------------------------------
# comparison
# --------------------------------------------------------------------------

def compare_scenarios(results: list[ScenarioResult]):
    """Cumulative and base-normalized losses, first scenario as the base.

    Only completed results over identical schedules/profiles compare.
    """
    if len(results) < 2:
        raise CellgridError("need at least two scenarios to compare")
    for r in results:
        if r.status != "completed":
            raise CellgridError(
                f"scenario {r.name!r} did not complete ({r.diagnostic}); "
                "comparisons require completed results")
    base = results[0]
    for r in results[1:]:
        if r.schedule_key() != base.schedule_key():
            raise CellgridError(
                f"scenario {r.name!r} ran a different schedule/profile set "
                f"than {base.name!r}")
    rows = []
    for r in results:
        rows.append({
            "name": r.name,
            "k_cells": r.k_cells,
            "cumulative_mwh": r.cumulative_mwh,
            "normalized": r.cumulative_mwh / base.cumulative_mwh,
            "violations": r.total_violations,
        })
    return rows


def write_comparison(rows, out_dir: str) -> tuple[str, str | None]:
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "comparison.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "k_cells", "cumulative_mwh", "normalized", "violations"])
        for row in rows:
            writer.writerow([row["name"], row["k_cells"],
                             f"{row['cumulative_mwh']:.9g}",
                             f"{row['normalized']:.9g}", row["violations"]])
    image = os.path.join(out_dir, "comparison.png")
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        names = [r["name"] for r in rows]
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
        ax1.bar(names, [r["cumulative_mwh"] for r in rows], color="#32618d")
        ax1.set_ylabel("cumulative losses [MWh]")
        ax1.set_title("total losses")
        ax2.bar(names, [r["normalized"] for r in rows], color="#3f8f4f")
        ax2.axhline(1.0, color="k", lw=0.8, ls="--")
        ax2.set_ylabel("normalized to base")
        ax2.set_title("normalized losses")
        for ax in (ax1, ax2):
            ax.tick_params(axis="x", rotation=30)
        fig.tight_layout()
        fig.savefig(image, dpi=130)
        plt.close(fig)
    except Exception as exc:
        log.warning("comparison plot failed: %s", exc)
        image = None
    return csv_path, image


def losses_plot(results: list[ScenarioResult], out_dir: str) -> str | None:
    path = os.path.join(out_dir, "losses_series.png")
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(9, 4))
        for r in results:
            hours = (np.arange(len(r.losses_mw)) + 1) * r.step_seconds / 3600.0
            ax.plot(hours, np.array(r.losses_mw) * 1e3, label=r.name, lw=0.9)
        ax.set_xlabel("hour")
        ax.set_ylabel("losses [kW]")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, dpi=130)
        plt.close(fig)
        return path
    except Exception as exc:
        log.warning("losses plot failed: %s", exc)
        return None


# --------------------------------------------------------------------------
# cells report
# --------------------------------------------------------------------------

def cells_report(network_path: str, k: int, modified: bool, out_dir: str,
                 mods=LINE_MODS):
    """Clustering pipeline artifacts for a network file.

    Writes the partition listing and heatmap CSV/image for the original
    network and, when ``modified``, for the length-modified variant too.
    Returns a dict with the partitions and heatmap paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    net = parse_network(network_path)
    report: dict = {}

    d_norm, partition, _sol = cell_pipeline(net, k)
    write_partition_csv(partition, os.path.join(out_dir, "partition_original.csv"))
    report["original"] = {
        "partition": partition,
        "d_norm": d_norm,
        "heatmap": export_heatmap(d_norm, os.path.join(out_dir, "heatmap_original")),
    }
    if modified:
        net_mod = net
        for line_id, km in mods:
            net_mod = modify_line_length(net_mod, line_id, km)
        d_norm_m, partition_m, _sol_m = cell_pipeline(net_mod, k)
        write_partition_csv(partition_m, os.path.join(out_dir, "partition_modified.csv"))
        report["modified"] = {
            "partition": partition_m,
            "d_norm": d_norm_m,
            "heatmap": export_heatmap(d_norm_m, os.path.join(out_dir, "heatmap_modified")),
        }
    return report
