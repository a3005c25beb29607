"""The concrete bus clients: grid engine, droop-controlled converter,
voltage dispatch controller, and recorder.

Coupling per step: the grid client solves the network using the converter's
last published (P, Q) and the latest dispatched setpoints, publishes node
voltages; the converter answers this step's voltage with a new (P, Q); the
dispatcher and recorder run free of the barrier.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .bus import FREE, STEPPED, BusClient, BusMessage, LastValueCache
from .dispatch import DeParams, run_ppvc_cycle
from .errors import CellgridError
from .netmodel import PerUnitNetwork, admittance_matrix, apply_setpoints, scale_injections
from .powerflow import solve_power_flow
from .profiles import Profile

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Q = f(U) droop
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DroopCurve:
    """Piecewise-linear reactive response: voltage pu -> fraction of q_max.

    Monotone non-increasing, exactly zero across the deadband, clamped at
    the outer knots.
    """

    knots: tuple[tuple[float, float], ...]
    deadband: tuple[float, float]

    def validate(self) -> None:
        if len(self.knots) < 2:
            raise CellgridError("droop curve needs at least 2 knots")
        us = [u for u, _ in self.knots]
        if any(b <= a for a, b in zip(us, us[1:])):
            raise CellgridError("droop knots must be strictly increasing in voltage")
        fracs = [f for _, f in self.knots]
        if any(b > a for a, b in zip(fracs, fracs[1:])):
            raise CellgridError("droop curve must be monotone non-increasing")
        u1, u2 = self.deadband
        if not u1 < u2:
            raise CellgridError("droop deadband is empty")
        if (u1, 0.0) not in self.knots or (u2, 0.0) not in self.knots:
            raise CellgridError("droop deadband edges must be zero knots")
        for u, f in self.knots:
            if u1 <= u <= u2 and f != 0.0:
                raise CellgridError(f"nonzero droop knot {f} at {u} inside the deadband")


def default_droop_curve() -> DroopCurve:
    return DroopCurve(knots=((0.95, 1.0), (0.98, 0.0), (1.02, 0.0), (1.05, -1.0)),
                      deadband=(0.98, 1.02))


def qu_droop(u: float, curve: DroopCurve, q_max: float) -> float:
    """Reactive output for terminal voltage u (pu); export positive.

    Inside the deadband the output is exactly zero; beyond the outer knots
    the fraction clamps at the end values.
    """
    if u <= 0:
        raise CellgridError(f"voltage must be positive, got {u}")
    u1, u2 = curve.deadband
    if u1 <= u <= u2:
        return 0.0
    knots = curve.knots
    if u <= knots[0][0]:
        return knots[0][1] * q_max
    if u >= knots[-1][0]:
        return knots[-1][1] * q_max
    for (ua, fa), (ub, fb) in zip(knots, knots[1:]):
        if ua <= u <= ub:
            frac = fa + (fb - fa) * (u - ua) / (ub - ua)
            return frac * q_max
    raise AssertionError("unreachable: knot scan fell through")


# --------------------------------------------------------------------------
# converter client
# --------------------------------------------------------------------------

class ConverterClient(BusClient):
    """Simulated grid-tied PV converter with Q = f(U) droop.

    Apparent power limiting is Q-priority: active power is reduced until
    sqrt(P^2 + Q^2) <= rated_kva.  Values are published in generator
    reference (export positive); consumers that think in load reference
    must flip the signs.
    """

    mode = STEPPED

    def __init__(self, node: str, rated_kva: float, q_max_kvar: float,
                 dc_kw_rating: float, irradiance: Profile,
                 curve: DroopCurve | None = None, name: str = "converter"):
        super().__init__(name)
        self.node = node
        self.rated_kva = rated_kva
        self.q_max_kvar = min(q_max_kvar, rated_kva)
        self.dc_kw_rating = dc_kw_rating
        self.irradiance = irradiance
        self.curve = curve or default_droop_curve()
        self.curve.validate()
        self.subscriptions = (f"signal/grid/{node}/voltage",)
        self._last_u: float = 1.0
        self._u_step: int | None = None
        self._pending: int | None = None
        self.quality_flags = 0

    def compute_output(self, step: int, u: float | None) -> tuple[float, float, bool]:
        """(P kW, Q kvar, held) for one step; ``u=None`` falls back to the
        last known voltage and flags the sample."""
        held = u is None
        if held:
            u = self._last_u
            self.quality_flags += 1
        else:
            self._last_u = u
        p_avail = self.irradiance.value(step) * self.dc_kw_rating
        p = min(p_avail, self.rated_kva)
        q = qu_droop(u, self.curve, self.q_max_kvar)
        if p * p + q * q > self.rated_kva ** 2:
            p = math.sqrt(max(self.rated_kva ** 2 - q * q, 0.0))
        return p, q, held

    def on_message(self, msg: BusMessage) -> None:
        if msg.msg_type == "STEP":
            self._pending = msg.step
            if self._u_step == msg.step:
                self._act(msg.step, self._last_u)
        elif msg.msg_type == "PUBLISH" and msg.topic == self.subscriptions[0]:
            self._last_u = float(msg.payload)
            self._u_step = msg.step
            if self._pending == msg.step:
                self._act(msg.step, self._last_u)

    def _act(self, step: int, u: float) -> None:
        self._pending = None
        p, q, held = self.compute_output(step, u)
        self.session.publish(f"signal/converter/{self.node}/p_kw", step, p)
        self.session.publish(f"signal/converter/{self.node}/q_kvar", step, q)
        self.session.step_done(step, quality="held_voltage" if held else None)


# --------------------------------------------------------------------------
# grid client
# --------------------------------------------------------------------------

class GridClient(BusClient):
    """Wraps the power-flow engine as the stepped grid simulation client.

    Per step: scale loads and internal generation by the profiles, overlay
    the latest dispatched setpoints and the external converter's (P, Q),
    solve, publish all node voltages plus loss/band summaries, ack the step.
    """

    mode = STEPPED

    def __init__(self, pun: PerUnitNetwork, load_profile: Profile,
                 gen_profile: Profile, converter_node: str | None = None,
                 converter_device: str | None = None,
                 band: tuple[float, float] = (0.95, 1.05),
                 on_failure: str = "abort", name: str = "grid",
                 tol: float = 1e-8):
        super().__init__(name)
        self.base = pun
        self.load_profile = load_profile
        self.gen_profile = gen_profile
        self.converter_node = converter_node
        self.converter_device = converter_device
        self.band = band
        self.on_failure = on_failure
        self.tol = tol
        self.subscriptions = ("setpoint/#",) + (
            (f"signal/converter/{converter_node}/#",) if converter_node else ())
        self.cache = LastValueCache()
        self._warm = None
        self._y = admittance_matrix(pun)
        self._gens = {g.id: g for g in pun.generators}
        self.steps_seen: list[int] = []

    def network_at(self, step: int) -> PerUnitNetwork:
        pun = scale_injections(self.base, self.load_profile.value(step),
                               self.gen_profile.value(step))
        setpoints: dict[str, tuple[float, float]] = {}
        base_mva = pun.base_mva
        scaled = {g.id: g for g in pun.generators}
        for gen_id, gen in self._gens.items():
            if not gen.controllable or gen.external:
                continue
            q = self.cache.get(f"setpoint/{gen_id}/q_mvar")
            if q is None:
                continue
            q = float(q)
            lo, hi = gen.q_min * base_mva, gen.q_max * base_mva
            if not lo <= q <= hi:
                log.warning("setpoint %.3f MVAr for %s outside [%g, %g]; clamping",
                            q, gen_id, lo, hi)
                q = min(max(q, lo), hi)
            setpoints[gen_id] = (scaled[gen_id].p * base_mva, q)
        if self.converter_device is not None and self.converter_node is not None:
            p_kw = self.cache.get(f"signal/converter/{self.converter_node}/p_kw", 0.0)
            q_kvar = self.cache.get(f"signal/converter/{self.converter_node}/q_kvar", 0.0)
            setpoints[self.converter_device] = (float(p_kw) / 1e3, float(q_kvar) / 1e3)
        return apply_setpoints(pun, setpoints)

    def on_message(self, msg: BusMessage) -> None:
        if msg.msg_type == "PUBLISH":
            self.cache.update(msg)
        elif msg.msg_type == "STEP":
            self._step(msg.step)

    def _step(self, step: int) -> None:
        self.steps_seen.append(step)
        pun = self.network_at(step)
        failure = None
        try:
            sol = solve_power_flow(pun, tol=self.tol, warm_start=self._warm, y=self._y)
            if not sol.converged:
                failure = f"power flow not converged at step {step} " \
                          f"(mismatch {sol.max_mismatch:.3e})"
        except CellgridError as exc:
            sol = None
            failure = f"power flow failed at step {step}: {exc}"

        publish = self.session.publish
        if failure is None:
            self._warm = (sol.v, sol.delta)
            v_lo, v_hi = self.band
            non_slack = pun.non_slack_indices()
            v_ns = sol.v[non_slack]
            violations = int(np.sum((v_ns < v_lo) | (v_ns > v_hi)))
            for bus_id, v in zip(sol.bus_ids, sol.v):
                publish(f"signal/grid/{bus_id}/voltage", step, float(v))
            publish("signal/grid/losses_mw", step, sol.total_losses_mw)
            publish("signal/grid/vmin", step, float(v_ns.min()))
            publish("signal/grid/vmax", step, float(v_ns.max()))
            publish("signal/grid/violations", step, violations)
            publish("signal/grid/quality", step, 1)
            self.session.step_done(step)
        else:
            log.error("%s", failure)
            publish("signal/grid/diag", step, failure)
            publish("signal/grid/quality", step, 0)
            if self.on_failure == "abort":
                # leaving the barrier mid-run makes the broker abort the experiment
                self.session.step_done(step, quality="pf_failed")
                self.session.shutdown()
                self.done = True
            else:
                if self._warm is not None:
                    v, _ = self._warm
                    for bus_id, vv in zip(pun.bus_ids, v):
                        publish(f"signal/grid/{bus_id}/voltage", step, float(vv))
                self.session.step_done(step, quality="pf_failed")


# --------------------------------------------------------------------------
# dispatch controller client
# --------------------------------------------------------------------------

class PpvcClient(BusClient):
    """Free-running per-cell dispatcher.

    Every ``cadence`` steps it rebuilds the operating state from the
    profiles, the converter's last (P, Q) and its own previous dispatch,
    optimizes each cell, and publishes ``setpoint/<device>/q_mvar`` values.
    Because it is not part of the barrier, a slow optimization never stalls
    the stepping clients.
    """

    mode = FREE

    def __init__(self, pun: PerUnitNetwork, partition, de_params: DeParams,
                 load_profile: Profile, gen_profile: Profile,
                 band: tuple[float, float] = (0.95, 1.05),
                 penalty_weight: float = 1e4, cadence: int = 15,
                 master_seed: int = 1, converter_node: str | None = None,
                 converter_device: str | None = None, name: str = "ppvc"):
        super().__init__(name)
        partition.validate_for_ppvc()
        self.base = pun
        self.partition = partition
        self.de_params = de_params
        self.load_profile = load_profile
        self.gen_profile = gen_profile
        self.band = band
        self.penalty_weight = penalty_weight
        self.cadence = cadence
        self.master_seed = master_seed
        self.converter_node = converter_node
        self.converter_device = converter_device
        self.subscriptions = ("signal/grid/losses_mw",) + (
            (f"signal/converter/{converter_node}/#",) if converter_node else ())
        self.cache = LastValueCache()
        base_mva = pun.base_mva
        self.reference_q = {g.id: g.q * base_mva for g in pun.generators
                            if g.controllable and not g.external}
        self.current_q = dict(self.reference_q)
        self.dispatches = 0

    def on_message(self, msg: BusMessage) -> None:
        if msg.msg_type != "PUBLISH":
            return
        self.cache.update(msg)
        if msg.topic == "signal/grid/losses_mw" and msg.step is not None:
            if msg.step >= self.cadence and msg.step % self.cadence == 0:
                self._dispatch(msg.step)

    def state_at(self, step: int) -> PerUnitNetwork:
        pun = scale_injections(self.base, self.load_profile.value(step),
                               self.gen_profile.value(step))
        base_mva = pun.base_mva
        scaled = {g.id: g for g in pun.generators}
        setpoints = {gen_id: (scaled[gen_id].p * base_mva, q)
                     for gen_id, q in self.current_q.items()}
        if self.converter_device is not None and self.converter_node is not None:
            p_kw = self.cache.get(f"signal/converter/{self.converter_node}/p_kw", 0.0)
            q_kvar = self.cache.get(f"signal/converter/{self.converter_node}/q_kvar", 0.0)
            setpoints[self.converter_device] = (float(p_kw) / 1e3, float(q_kvar) / 1e3)
        return apply_setpoints(pun, setpoints)

    def _dispatch(self, step: int) -> None:
        from .rng import derive_seed

        pun = self.state_at(step)
        params = DeParams(
            population=self.de_params.population, mutation=self.de_params.mutation,
            crossover=self.de_params.crossover,
            max_generations=self.de_params.max_generations,
            tolerance=self.de_params.tolerance,
            seed=derive_seed(self.master_seed, step))
        setpoints, _results = run_ppvc_cycle(
            pun, self.partition, params, self.band, self.penalty_weight,
            reference_setpoints=self.reference_q)
        self.dispatches += 1
        for gen_id, (_p, q) in sorted(setpoints.items()):
            self.current_q[gen_id] = q
            self.session.publish(f"setpoint/{gen_id}/q_mvar", step, q)


# --------------------------------------------------------------------------
# recorder
# --------------------------------------------------------------------------

class RecordStore:
    """Append-only per-topic series of (step, time_ms, value)."""

    def __init__(self):
        self._series: dict[str, list[tuple[int, float, object]]] = {}

    def append(self, topic: str, step: int, time_ms: float, value) -> None:
        series = self._series.setdefault(topic, [])
        if series and step < series[-1][0]:
            raise CellgridError(
                f"step regression on {topic!r}: {step} after {series[-1][0]}")
        series.append((step, time_ms, value))

    def topics(self) -> list[str]:
        return sorted(self._series)

    def rows(self, topic: str) -> list[tuple[int, float, object]]:
        return list(self._series.get(topic, []))

    def series(self, topic: str) -> tuple[np.ndarray, np.ndarray]:
        rows = self._series.get(topic, [])
        return (np.array([r[0] for r in rows], dtype=int),
                np.array([float(r[2]) for r in rows]))

    def __len__(self) -> int:
        return sum(len(s) for s in self._series.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, RecordStore):
            return NotImplemented
        return self._series == other._series

    @staticmethod
    def _format_value(value) -> str:
        if isinstance(value, bool):
            return json.dumps(value)
        if isinstance(value, float):
            return f"{value:.9g}"
        if isinstance(value, int):
            return str(value)
        return json.dumps(value, sort_keys=True)

    def export_csv(self, path: str | os.PathLike) -> None:
        directory = os.path.dirname(str(path))
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["topic", "step", "wall_time_ms", "value"])
            for topic in self.topics():
                for step, t_ms, value in self._series[topic]:
                    writer.writerow([topic, step, f"{t_ms:.9g}",
                                     self._format_value(value)])

    @staticmethod
    def load_csv(path: str | os.PathLike) -> "RecordStore":
        store = RecordStore()
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != ["topic", "step", "wall_time_ms", "value"]:
                raise CellgridError(f"unexpected recorder CSV header: {header}")
            for topic, step, t_ms, raw in reader:
                try:
                    value: object = float(raw)
                    if raw.lstrip("-").isdigit():
                        value = int(raw)
                except ValueError:
                    value = json.loads(raw)
                store.append(topic, int(step), float(t_ms), value)
        return store


class RecorderClient(BusClient):
    """Free-running archive of everything published on signal/ and setpoint/.

    In fast (as-fast-as-possible) runs the time column is the simulated
    clock (step times step size) so exports are bit-reproducible; paced runs
    stamp wall time.
    """

    mode = FREE
    subscriptions = ("signal/#", "setpoint/#")

    def __init__(self, name: str = "recorder", time_source: str = "sim"):
        super().__init__(name)
        self.store = RecordStore()
        self.time_source = time_source
        self._step_ms = 60_000.0
        self._t0 = None

    def on_ready(self, schedule: dict) -> None:
        self._step_ms = float(schedule.get("step_seconds", 60.0)) * 1e3
        if schedule.get("pacing") == "paced":
            self.time_source = "wall"

    def on_message(self, msg: BusMessage) -> None:
        if msg.msg_type != "PUBLISH" or msg.topic is None:
            return
        step = msg.step if msg.step is not None else -1
        if self.time_source == "sim":
            t_ms = step * self._step_ms
        else:
            import time
            if self._t0 is None:
                self._t0 = time.monotonic()
            t_ms = (time.monotonic() - self._t0) * 1e3
        self.store.append(msg.topic, step, t_ms, msg.payload)

    def export_csv(self, path) -> None:
        self.store.export_csv(path)
