"""Barrier-synchronized pub/sub bus.

One broker routes topic-addressed publications between named clients and
hosts the synchronization logic: *stepped* clients are gated by a per-step
barrier (STEP out, STEP_DONE back), *free-running* clients publish whenever
they like and never appear in a barrier.  The broker core is transport
agnostic and strictly event-serial; both the deterministic in-process
transport here and the TCP transport in :mod:`cellgrid.tcpbus` feed it one
wire line at a time.

Wire protocol v1: one JSON object per newline-terminated UTF-8 line with
required fields ``t`` (message type), ``from`` (sender) and ``seq`` (per
sender, strictly increasing).  PUBLISH adds ``topic``/``step``/``val``;
STEP and STEP_DONE add ``step``.  Unknown fields are ignored.
"""

from __future__ import annotations

import json
import logging
import time
from collections import deque
from dataclasses import dataclass, field

from .errors import BusProtocolError

log = logging.getLogger(__name__)

DEFAULT_PORT = 7788

REGISTER = "REGISTER"
REGISTER_ACK = "REGISTER_ACK"
SUBSCRIBE = "SUBSCRIBE"
PUBLISH = "PUBLISH"
STEP = "STEP"
STEP_DONE = "STEP_DONE"
SHUTDOWN = "SHUTDOWN"
ERROR = "ERROR"
MSG_TYPES = {REGISTER, REGISTER_ACK, SUBSCRIBE, PUBLISH, STEP, STEP_DONE, SHUTDOWN, ERROR}

STEPPED = "stepped"
FREE = "free-running"

BROKER_NAME = "sync"


# --------------------------------------------------------------------------
# messages
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BusMessage:
    msg_type: str
    sender: str
    seq: int
    topic: str | None = None
    step: int | None = None
    payload: object = None            # wire field "val": number or object
    mode: str | None = None           # REGISTER
    subs: tuple[str, ...] | None = None
    error: str | None = None          # ERROR / SHUTDOWN reason
    schedule: dict | None = None      # REGISTER_ACK
    quality: str | None = None        # optional degradation flag on STEP_DONE

    def to_wire(self) -> str:
        d: dict = {"t": self.msg_type, "from": self.sender, "seq": self.seq}
        if self.topic is not None:
            d["topic"] = self.topic
        if self.step is not None:
            d["step"] = self.step
        if self.payload is not None:
            d["val"] = self.payload
        if self.mode is not None:
            d["mode"] = self.mode
        if self.subs is not None:
            d["subs"] = list(self.subs)
        if self.error is not None:
            d["err"] = self.error
        if self.schedule is not None:
            d["schedule"] = self.schedule
        if self.quality is not None:
            d["quality"] = self.quality
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_wire(line: str) -> "BusMessage":
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BusProtocolError(f"not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise BusProtocolError("wire message must be a JSON object")
        for req in ("t", "from", "seq"):
            if req not in d:
                raise BusProtocolError(f"missing required field {req!r}")
        t = d["t"]
        if t not in MSG_TYPES:
            raise BusProtocolError(f"unknown message type {t!r}")
        seq = d["seq"]
        if not isinstance(seq, int) or seq < 0 or seq >= 2 ** 64:
            raise BusProtocolError(f"seq must be an unsigned 64-bit integer, got {seq!r}")
        subs = d.get("subs")
        return BusMessage(
            msg_type=t, sender=str(d["from"]), seq=seq,
            topic=d.get("topic"), step=d.get("step"), payload=d.get("val"),
            mode=d.get("mode"), subs=tuple(subs) if subs is not None else None,
            error=d.get("err"), schedule=d.get("schedule"), quality=d.get("quality"))


# --------------------------------------------------------------------------
# topics
# --------------------------------------------------------------------------

def validate_topic(topic: str) -> None:
    if not topic or any(level == "" for level in topic.split("/")):
        raise BusProtocolError(f"malformed topic {topic!r} (empty level)")


def validate_pattern(pattern: str) -> None:
    levels = pattern.split("/")
    if not pattern or any(level == "" for level in levels):
        raise BusProtocolError(f"malformed pattern {pattern!r} (empty level)")
    if "#" in levels and levels.index("#") != len(levels) - 1:
        raise BusProtocolError(f"'#' must be the last level in {pattern!r}")


def topic_matches(pattern: str, topic: str) -> bool:
    """MQTT-style matching: '+' is one level, trailing '#' is any remainder."""
    p_levels = pattern.split("/")
    t_levels = topic.split("/")
    for i, p in enumerate(p_levels):
        if p == "#":
            return True
        if i >= len(t_levels):
            return False
        if p != "+" and p != t_levels[i]:
            return False
    return len(p_levels) == len(t_levels)


# --------------------------------------------------------------------------
# schedule / manifest / event log
# --------------------------------------------------------------------------

FAST = "fast"
PACED = "paced"


@dataclass(frozen=True)
class Schedule:
    steps: int
    step_seconds: float
    pacing: str = FAST
    speedup: float = 1.0

    def ack_payload(self) -> dict:
        return {"steps": self.steps, "step_seconds": self.step_seconds,
                "pacing": self.pacing}


@dataclass(frozen=True)
class Manifest:
    clients: dict[str, str]  # name -> mode
    strict: bool = True


@dataclass(frozen=True)
class LogRecord:
    idx: int
    wall_ms: float
    kind: str   # recv | send | barrier | start | finish | abort | drop
    who: str    # client/connection the event concerns
    body: str   # canonical wire line or info text

    def to_json(self, include_wall: bool = True) -> str:
        d = {"idx": self.idx, "kind": self.kind, "who": self.who, "body": self.body}
        if include_wall:
            d["wall_ms"] = round(self.wall_ms, 3)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


class EventLog:
    def __init__(self, clock=time.monotonic):
        self.records: list[LogRecord] = []
        self._clock = clock
        self._t0 = clock()

    def append(self, kind: str, who: str, body: str) -> None:
        self.records.append(LogRecord(
            idx=len(self.records), wall_ms=(self._clock() - self._t0) * 1e3,
            kind=kind, who=who, body=body))

    def signature(self) -> list[tuple[str, str, str]]:
        """Wall-clock-free view used for bit-identical trace comparison."""
        return [(r.kind, r.who, r.body) for r in self.records]

    def sends(self) -> list[tuple[str, str]]:
        return [(r.who, r.body) for r in self.records if r.kind == "send"]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(r.to_json() + "\n")


# --------------------------------------------------------------------------
# broker core
# --------------------------------------------------------------------------

class _Session:
    __slots__ = ("name", "mode", "patterns", "conn_id", "sink", "last_seq")

    def __init__(self, name, mode, patterns, conn_id, sink):
        self.name = name
        self.mode = mode
        self.patterns = list(patterns)
        self.conn_id = conn_id
        self.sink = sink
        self.last_seq = -1


class BrokerCore:
    """Routing and barrier state machine; call pattern is strictly serial.

    The owning transport attaches connections with an outbound ``sink``
    callable and feeds raw wire lines through :meth:`handle_line`; it also
    has to call :meth:`service` regularly (after each event is enough, plus
    on a timer in paced mode) so due step broadcasts fire.
    """

    def __init__(self, manifest: Manifest, schedule: Schedule,
                 clock=time.monotonic, record_transcript: bool = True):
        self.manifest = manifest
        self.schedule = schedule
        self.clock = clock
        self.event_log = EventLog(clock)
        self.transcript: list[tuple[str, str]] | None = [] if record_transcript else None
        self.sessions: dict[str, _Session] = {}
        self._conn_sinks: dict[str, object] = {}
        self._conn_names: dict[str, str] = {}
        self.current_step = 0
        self.pending: set[str] = set()
        self.started = False
        self.finished = False
        self.aborted = False
        self.abort_reason: str | None = None
        self._seq = 0
        self._t0: float | None = None
        self._due: float | None = None

    # -- connection lifecycle ------------------------------------------------

    def attach(self, conn_id: str, sink) -> None:
        self._conn_sinks[conn_id] = sink

    def handle_disconnect(self, conn_id: str) -> None:
        name = self._conn_names.pop(conn_id, None)
        self._conn_sinks.pop(conn_id, None)
        if name is None or self.finished:
            return
        session = self.sessions.pop(name, None)
        if session is None:
            return
        if session.mode == STEPPED and self.started:
            self._abort(f"stepped client {name!r} disconnected at step {self.current_step}")
        else:
            self.event_log.append("drop", name, "disconnected; continuing")

    # -- inbound -------------------------------------------------------------

    def handle_line(self, conn_id: str, line: str) -> None:
        line = line.rstrip("\n")
        if not line:
            return
        if self.transcript is not None:
            self.transcript.append((conn_id, line))
        try:
            msg = BusMessage.from_wire(line)
        except BusProtocolError as exc:
            self.event_log.append("drop", conn_id, f"undecodable line: {exc}")
            self._send_conn(conn_id, self._make(ERROR, error=str(exc)))
            return
        self.event_log.append("recv", self._conn_names.get(conn_id, conn_id), msg.to_wire())
        self.handle_message(conn_id, msg)
        self.service()

    def handle_message(self, conn_id: str, msg: BusMessage) -> None:
        if msg.msg_type == REGISTER:
            self._on_register(conn_id, msg)
            return
        name = self._conn_names.get(conn_id)
        if name is None or name != msg.sender:
            self._send_conn(conn_id, self._make(
                ERROR, error=f"sender {msg.sender!r} is not registered on this connection"))
            return
        session = self.sessions[name]
        if msg.seq <= session.last_seq:
            self.event_log.append("drop", name,
                                  f"stale seq {msg.seq} (last {session.last_seq})")
            self._send(session, self._make(
                ERROR, error=f"seq {msg.seq} not increasing (last {session.last_seq})"))
            return
        session.last_seq = msg.seq

        if msg.msg_type == PUBLISH:
            self._on_publish(session, msg)
        elif msg.msg_type == STEP_DONE:
            self._on_step_done(session, msg)
        elif msg.msg_type == SUBSCRIBE:
            for pattern in msg.subs or ():
                try:
                    validate_pattern(pattern)
                except BusProtocolError as exc:
                    self._send(session, self._make(ERROR, error=str(exc)))
                    return
                session.patterns.append(pattern)
        elif msg.msg_type == SHUTDOWN:
            self._on_client_shutdown(session)
        else:
            self._send(session, self._make(
                ERROR, error=f"unexpected {msg.msg_type} from client"))

    # -- handlers --------------------------------------------------------

    def _on_register(self, conn_id: str, msg: BusMessage) -> None:
        name = msg.sender
        mode = msg.mode or STEPPED
        reply_to = lambda m: self._send_conn(conn_id, m)  # noqa: E731
        if mode not in (STEPPED, FREE):
            reply_to(self._make(ERROR, error=f"unknown mode {mode!r}"))
            return
        if name in self.sessions:
            reply_to(self._make(ERROR, error=f"duplicate client {name!r}"))
            return
        in_manifest = name in self.manifest.clients
        if self.manifest.strict and not in_manifest:
            reply_to(self._make(ERROR, error=f"client {name!r} not in experiment manifest"))
            return
        if self.started and self.manifest.strict:
            reply_to(self._make(ERROR, error="experiment already started"))
            return
        if in_manifest and self.manifest.clients[name] != mode:
            reply_to(self._make(
                ERROR, error=f"client {name!r} registered as {mode}, manifest says "
                             f"{self.manifest.clients[name]}"))
            return
        for pattern in msg.subs or ():
            try:
                validate_pattern(pattern)
            except BusProtocolError as exc:
                reply_to(self._make(ERROR, error=str(exc)))
                return

        session = _Session(name, mode, msg.subs or (), conn_id,
                           self._conn_sinks.get(conn_id))
        session.last_seq = msg.seq
        self.sessions[name] = session
        self._conn_names[conn_id] = name
        self._send(session, self._make(REGISTER_ACK, schedule=self.schedule.ack_payload()))
        self.maybe_start()

    def maybe_start(self) -> None:
        if (not self.started and not self.finished
                and all(n in self.sessions for n in self.manifest.clients)):
            self._start()

    def _on_publish(self, session: _Session, msg: BusMessage) -> None:
        try:
            validate_topic(msg.topic or "")
        except BusProtocolError as exc:
            self._send(session, self._make(ERROR, error=str(exc)))
            return
        for other in self.sessions.values():
            for pattern in other.patterns:
                if topic_matches(pattern, msg.topic):
                    self._send(other, msg)
                    break

    def _on_step_done(self, session: _Session, msg: BusMessage) -> None:
        if session.mode != STEPPED:
            self.event_log.append("drop", session.name, "STEP_DONE from free-running client")
            return
        if self.finished:
            self.event_log.append("drop", session.name,
                                  f"STEP_DONE({msg.step}) after experiment end")
            return
        if msg.step != self.current_step:
            self.event_log.append(
                "drop", session.name,
                f"stale STEP_DONE({msg.step}) at step {self.current_step}")
            return
        self.pending.discard(session.name)
        if not self.pending:
            self._barrier_complete()

    def _on_client_shutdown(self, session: _Session) -> None:
        conn_id = session.conn_id
        self._conn_names.pop(conn_id, None)
        self.sessions.pop(session.name, None)
        if session.mode == STEPPED and self.started and not self.finished:
            self._abort(f"stepped client {session.name!r} left at step {self.current_step}")
        else:
            self.event_log.append("drop", session.name, "client shut down")

    # -- stepping ----------------------------------------------------------

    def _start(self) -> None:
        self.started = True
        self._t0 = self.clock()
        self.event_log.append("start", BROKER_NAME,
                              f"schedule {self.schedule.steps}x{self.schedule.step_seconds}s "
                              f"{self.schedule.pacing}")
        self._arm_step(1)
        self.service()

    def _due_time(self, step: int) -> float:
        if self.schedule.pacing != PACED:
            return self._t0
        return self._t0 + (step - 1) * self.schedule.step_seconds / self.schedule.speedup

    def _arm_step(self, step: int) -> None:
        self.current_step = step
        self._due = self._due_time(step)

    def service(self) -> float | None:
        """Fire due step broadcasts; returns the next due wall time if waiting."""
        if self.finished:
            self._due = None
            return None
        while self._due is not None and not self.finished:
            now = self.clock()
            if now < self._due:
                return self._due
            self._due = None
            self._broadcast_step(self.current_step)
            if self.pending:
                return None
            # no stepped clients: the barrier completes immediately
            self._barrier_complete()
        return self._due

    def _broadcast_step(self, step: int) -> None:
        stepped = [s for s in self.sessions.values() if s.mode == STEPPED]
        self.pending = {s.name for s in stepped}
        self.event_log.append("barrier", BROKER_NAME,
                              f"step {step} pending {sorted(self.pending)}")
        msg = self._make(STEP, step=step)
        for s in stepped:
            self._send(s, msg)

    def _barrier_complete(self) -> None:
        if self.current_step >= self.schedule.steps:
            self._finish()
        else:
            self._arm_step(self.current_step + 1)

    def _finish(self) -> None:
        self.finished = True
        self._due = None
        self.event_log.append("finish", BROKER_NAME,
                              f"completed {self.schedule.steps} steps")
        msg = self._make(SHUTDOWN, error="complete")
        for s in list(self.sessions.values()):
            self._send(s, msg)

    def _abort(self, reason: str) -> None:
        if self.finished:
            return
        self.aborted = True
        self.finished = True
        self._due = None
        self.abort_reason = reason
        self.event_log.append("abort", BROKER_NAME, reason)
        msg = self._make(SHUTDOWN, error=f"abort: {reason}")
        for s in list(self.sessions.values()):
            self._send(s, msg)

    # -- outbound ------------------------------------------------------------

    def _make(self, msg_type: str, **kw) -> BusMessage:
        self._seq += 1
        return BusMessage(msg_type=msg_type, sender=BROKER_NAME, seq=self._seq, **kw)

    def _send(self, session: _Session, msg: BusMessage) -> None:
        line = msg.to_wire()
        self.event_log.append("send", session.name, line)
        if session.sink is not None:
            session.sink(line)

    def _send_conn(self, conn_id: str, msg: BusMessage) -> None:
        line = msg.to_wire()
        self.event_log.append("send", self._conn_names.get(conn_id, conn_id), line)
        sink = self._conn_sinks.get(conn_id)
        if sink is not None:
            sink(line)


def replay_transcript(transcript: list[tuple[str, str]], manifest: Manifest,
                      schedule: Schedule) -> EventLog:
    """Feed a recorded inbound transcript to a fresh broker core.

    Routing depends only on the inbound event order, so the resulting event
    log's send sequence must match the live session's.
    """
    core = BrokerCore(manifest, schedule, record_transcript=False)
    for conn_id, _line in transcript:
        if conn_id not in core._conn_sinks:
            core.attach(conn_id, None)
    for conn_id, line in transcript:
        core.handle_line(conn_id, line)
    return core


# --------------------------------------------------------------------------
# client-side API (transport neutral)
# --------------------------------------------------------------------------

class ClientSession:
    """What a client uses to talk to the bus: publish / step_done / subscribe."""

    def __init__(self, name: str, send_line):
        self.name = name
        self._send_line = send_line
        self._seq = 0
        self.schedule: dict | None = None

    def _send(self, msg_type: str, **kw) -> None:
        self._seq += 1
        self._send_line(BusMessage(msg_type=msg_type, sender=self.name,
                                   seq=self._seq, **kw).to_wire())

    def register(self, mode: str, subscriptions) -> None:
        self._send(REGISTER, mode=mode, subs=tuple(subscriptions))

    def publish(self, topic: str, step: int | None, value) -> None:
        self._send(PUBLISH, topic=topic, step=step, payload=value)

    def step_done(self, step: int, quality: str | None = None) -> None:
        self._send(STEP_DONE, step=step, quality=quality)

    def subscribe(self, *patterns: str) -> None:
        self._send(SUBSCRIBE, subs=patterns)

    def shutdown(self) -> None:
        self._send(SHUTDOWN)


class BusClient:
    """Base class for bus participants; subclasses react in ``on_message``."""

    name: str = "client"
    mode: str = STEPPED
    subscriptions: tuple[str, ...] = ()

    def __init__(self, name: str | None = None):
        if name is not None:
            self.name = name
        self.session: ClientSession | None = None
        self.done = False

    # transport adapters call these
    def attach_session(self, session: ClientSession) -> None:
        self.session = session

    def handle_line(self, line: str) -> None:
        msg = BusMessage.from_wire(line)
        if msg.msg_type == REGISTER_ACK:
            self.session.schedule = msg.schedule
            self.on_ready(msg.schedule or {})
        elif msg.msg_type == SHUTDOWN:
            self.done = True
            self.on_shutdown(msg.error or "")
        elif msg.msg_type == ERROR:
            self.on_error(msg.error or "")
        else:
            self.on_message(msg)

    # subclass hooks
    def on_ready(self, schedule: dict) -> None:
        pass

    def on_message(self, msg: BusMessage) -> None:
        pass

    def on_shutdown(self, reason: str) -> None:
        pass

    def on_error(self, error: str) -> None:
        log.warning("client %s got bus error: %s", self.name, error)


class LastValueCache:
    """Per-topic latest value, the consumption model for setpoint streams."""

    def __init__(self):
        self._values: dict[str, object] = {}
        self._steps: dict[str, int | None] = {}

    def update(self, msg: BusMessage) -> None:
        if msg.msg_type == PUBLISH and msg.topic is not None:
            self._values[msg.topic] = msg.payload
            self._steps[msg.topic] = msg.step

    def get(self, topic: str, default=None):
        return self._values.get(topic, default)

    def step_of(self, topic: str):
        return self._steps.get(topic)

    def items(self):
        return self._values.items()


# --------------------------------------------------------------------------
# deterministic in-process transport
# --------------------------------------------------------------------------

class InProcBus:
    """Single-threaded cooperative transport with one global FIFO.

    Every wire line (client -> broker and broker -> client) is an event in
    one queue, processed strictly in order, so a run's interleaving and the
    broker event log are bit-reproducible.
    """

    def __init__(self, manifest: Manifest, schedule: Schedule):
        self.core = BrokerCore(manifest, schedule)
        self.clients: list[BusClient] = []
        self._queue: deque[tuple[str, str, str]] = deque()
        self._by_name: dict[str, BusClient] = {}

    def add_client(self, client: BusClient) -> None:
        conn_id = f"c{len(self.clients) + 1}"
        self.clients.append(client)
        self._by_name[client.name] = client
        self.core.attach(conn_id, lambda line, name=client.name:
                         self._queue.append(("deliver", name, line)))
        session = ClientSession(client.name, lambda line, cid=conn_id:
                                self._queue.append(("inbound", cid, line)))
        client.attach_session(session)

    def run(self, max_events: int = 50_000_000) -> None:
        self.core.maybe_start()
        for client in self.clients:
            client.session.register(client.mode, client.subscriptions)
        events = 0
        while True:
            while self._queue:
                events += 1
                if events > max_events:
                    raise RuntimeError("event budget exceeded; runaway experiment?")
                kind, target, line = self._queue.popleft()
                if kind == "inbound":
                    self.core.handle_line(target, line)
                else:
                    client = self._by_name[target]
                    client.handle_line(line)
            due = self.core.service()
            if due is not None and not self._queue:
                delay = due - self.core.clock()
                if delay > 0:
                    time.sleep(delay)
                continue
            if self._queue:
                continue
            if self.core.finished:
                break
            if not self.core.started:
                raise RuntimeError(
                    "bus idle before start; manifest waits for "
                    f"{sorted(set(self.core.manifest.clients) - set(self.core.sessions))}")
            raise RuntimeError(
                f"bus idle at step {self.core.current_step} waiting for "
                f"{sorted(self.core.pending)}; a stepped client did not ack")
