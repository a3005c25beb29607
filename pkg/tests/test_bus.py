import json
import random
import time

import pytest

from cellgrid.bus import (FAST, FREE, PACED, STEPPED, BrokerCore, BusMessage,
                          InProcBus, Manifest, Schedule, replay_transcript,
                          topic_matches, validate_pattern, validate_topic)
from cellgrid.errors import BusProtocolError

from helpers import FreeListener, QuittingStepper, Stepper


def fast(steps=5, step_seconds=60.0):
    return Schedule(steps=steps, step_seconds=step_seconds, pacing=FAST)


# -- topics -------------------------------------------------------------------

def test_multi_level_wildcard():
    assert topic_matches("signal/grid/#", "signal/grid/node21/voltage")
    assert topic_matches("signal/#", "signal")
    assert not topic_matches("signal/grid/#", "setpoint/pv03/q_mvar")


def test_single_level_wildcard():
    assert topic_matches("signal/+/node21/voltage", "signal/grid/node21/voltage")
    assert not topic_matches("signal/+/node21/voltage", "signal/grid/x/node21/voltage")
    assert not topic_matches("signal/+", "signal")


def test_exact_match_only_without_wildcards():
    assert topic_matches("a/b", "a/b")
    assert not topic_matches("a/b", "a/b/c")
    assert not topic_matches("a/b/c", "a/b")


def test_malformed_topics_rejected():
    with pytest.raises(BusProtocolError, match="empty level"):
        validate_topic("a//b")
    with pytest.raises(BusProtocolError):
        validate_topic("")
    with pytest.raises(BusProtocolError, match="last level"):
        validate_pattern("a/#/b")


# -- codec ---------------------------------------------------------------------

def test_wire_roundtrip_publish():
    msg = BusMessage(msg_type="PUBLISH", sender="grid", seq=7,
                     topic="signal/grid/node21/voltage", step=12, payload=1.0125)
    line = msg.to_wire()
    d = json.loads(line)
    assert d["t"] == "PUBLISH" and d["from"] == "grid" and d["seq"] == 7
    assert d["topic"] == "signal/grid/node21/voltage"
    assert d["step"] == 12 and d["val"] == 1.0125
    assert BusMessage.from_wire(line) == msg


def test_wire_register_shape():
    msg = BusMessage(msg_type="REGISTER", sender="grid", seq=1,
                     mode="stepped", subs=("setpoint/#",))
    d = json.loads(msg.to_wire())
    assert d == {"t": "REGISTER", "from": "grid", "seq": 1,
                 "mode": "stepped", "subs": ["setpoint/#"]}


def test_unknown_fields_ignored():
    msg = BusMessage.from_wire(
        '{"t":"STEP_DONE","from":"grid","seq":3,"step":9,"future_field":[1,2]}')
    assert msg.msg_type == "STEP_DONE" and msg.step == 9


def test_missing_required_field_rejected():
    with pytest.raises(BusProtocolError, match="seq"):
        BusMessage.from_wire('{"t":"STEP","from":"sync"}')
    with pytest.raises(BusProtocolError, match="JSON"):
        BusMessage.from_wire("not json")
    with pytest.raises(BusProtocolError, match="unknown message type"):
        BusMessage.from_wire('{"t":"NOPE","from":"x","seq":1}')


def test_object_payload_roundtrip():
    msg = BusMessage(msg_type="PUBLISH", sender="x", seq=1, topic="a/b",
                     step=1, payload={"p": 1.5, "q": -0.5})
    assert BusMessage.from_wire(msg.to_wire()).payload == {"p": 1.5, "q": -0.5}


# -- registration -------------------------------------------------------------

def run_bus(clients, manifest=None, schedule=None):
    names = {c.name: c.mode for c in clients}
    bus = InProcBus(manifest or Manifest(clients=names),
                    schedule or fast())
    for c in clients:
        bus.add_client(c)
    bus.run()
    return bus


def test_register_ack_carries_schedule():
    s = Stepper("grid")
    bus = InProcBus(Manifest(clients={"grid": STEPPED}),
                    Schedule(steps=1440, step_seconds=60.0))
    bus.add_client(s)
    bus.run()
    assert s.session.schedule == {"steps": 1440, "step_seconds": 60.0, "pacing": "fast"}
    assert s.steps == list(range(1, 1441))


def test_duplicate_client_name_rejected():
    core = BrokerCore(Manifest(clients={"grid": STEPPED}, strict=False), fast())
    replies = {"c1": [], "c2": []}
    core.attach("c1", replies["c1"].append)
    core.attach("c2", replies["c2"].append)
    reg = BusMessage(msg_type="REGISTER", sender="grid", seq=1, mode=STEPPED).to_wire()
    core.handle_line("c1", reg)
    core.handle_line("c2", reg)
    first = BusMessage.from_wire(replies["c1"][0])
    second = BusMessage.from_wire(replies["c2"][0])
    assert first.msg_type == "REGISTER_ACK"
    assert second.msg_type == "ERROR"
    assert "duplicate client" in second.error


def test_strict_manifest_rejects_unknown_client():
    core = BrokerCore(Manifest(clients={"grid": STEPPED}), fast())
    replies = []
    core.attach("c1", replies.append)
    core.handle_line("c1", BusMessage(msg_type="REGISTER", sender="intruder",
                                      seq=1, mode=FREE).to_wire())
    assert BusMessage.from_wire(replies[0]).msg_type == "ERROR"


def test_registration_after_start_rejected_when_strict():
    core = BrokerCore(Manifest(clients={}, strict=True), fast(steps=1))
    core.maybe_start()
    assert core.finished  # empty barrier ran the schedule
    replies = []
    core.attach("c1", replies.append)
    core.handle_line("c1", BusMessage(msg_type="REGISTER", sender="late", seq=1,
                                      mode=FREE).to_wire())
    assert BusMessage.from_wire(replies[0]).msg_type == "ERROR"


def test_zero_client_manifest_completes():
    bus = InProcBus(Manifest(clients={}), fast(steps=100))
    bus.run()
    assert bus.core.finished and not bus.core.aborted
    assert bus.core.current_step == 100


# -- routing -------------------------------------------------------------------

def test_per_publisher_order_preserved():
    pub = Stepper("pub", topics=("signal/a",))
    sub = FreeListener("sub", subscriptions=("signal/#",))
    run_bus([pub, sub], schedule=fast(steps=3))
    seqs = [r[4] for r in sub.received]
    assert [r[3] for r in sub.received] == [1.0, 2.0, 3.0]
    assert seqs == sorted(seqs)


def test_publish_routes_by_pattern():
    pub = Stepper("pub", topics=("signal/grid/node21/voltage", "other/x"))
    sub = FreeListener("sub", subscriptions=("signal/+/node21/voltage",))
    run_bus([pub, sub], schedule=fast(steps=2))
    assert all(r[1] == "signal/grid/node21/voltage" for r in sub.received)
    assert len(sub.received) == 2


def test_malformed_topic_publish_gets_error():
    class BadPublisher(Stepper):
        def on_message(self, msg):
            if msg.msg_type == "STEP":
                self.session.publish("a//b", msg.step, 0.0)
                self.session.step_done(msg.step)

    bad = BadPublisher("bad")
    errors = []
    bad.on_error = errors.append
    run_bus([bad], schedule=fast(steps=1))
    assert errors and "empty level" in errors[0]


def test_stale_seq_dropped():
    core = BrokerCore(Manifest(clients={"x": FREE}, strict=False), fast())
    out = []
    core.attach("c1", out.append)
    core.handle_line("c1", BusMessage(msg_type="REGISTER", sender="x", seq=5,
                                      mode=FREE, subs=("a/#",)).to_wire())
    core.handle_line("c1", BusMessage(msg_type="PUBLISH", sender="x", seq=4,
                                      topic="a/b", step=1, payload=1).to_wire())
    kinds = [BusMessage.from_wire(line).msg_type for line in out]
    assert "ERROR" in kinds


# -- barrier -------------------------------------------------------------------

def barrier_records(core):
    out = []
    for rec in core.event_log.records:
        if rec.kind == "barrier":
            step = int(rec.body.split()[1])
            pending = rec.body.split("pending", 1)[1].strip()
            out.append((step, pending))
    return out


def test_barrier_one_step_broadcast_after_all_acks():
    steppers = [Stepper(f"s{i}") for i in range(3)]
    bus = run_bus(steppers, schedule=fast(steps=4))
    log = bus.core.event_log.records
    for n in range(1, 4):
        dones = [i for i, r in enumerate(log)
                 if r.kind == "recv" and f'"step":{n}' in r.body
                 and '"t":"STEP_DONE"' in r.body]
        next_steps = [i for i, r in enumerate(log)
                      if r.kind == "send" and f'"step":{n + 1}' in r.body
                      and '"t":"STEP"' in r.body]
        assert len(dones) == 3
        assert len(next_steps) == 3
        assert max(dones) < min(next_steps)
    for s in steppers:
        assert s.steps == [1, 2, 3, 4]


def test_free_client_never_in_pending_set():
    clients = [Stepper("s1", topics=("signal/x",)), Stepper("s2"),
               FreeListener("rec", subscriptions=("signal/#",))]
    bus = run_bus(clients, schedule=fast(steps=10))
    for _step, pending in barrier_records(bus.core):
        assert "rec" not in pending
    assert bus.core.finished and not bus.core.aborted


def test_free_client_silence_never_stalls():
    """A free client that only publishes every 15 observed steps."""
    clients = [Stepper("grid", topics=("signal/tick",)),
               FreeListener("opt", subscriptions=("signal/#",), publish_every=15)]
    bus = run_bus(clients, schedule=fast(steps=45))
    assert bus.core.finished
    opt_msgs = [r for r in bus.core.event_log.records
                if r.kind == "recv" and '"from":"opt"' in r.body
                and '"t":"PUBLISH"' in r.body]
    assert len(opt_msgs) == 3  # steps 15, 30, 45


def test_stepped_disconnect_aborts():
    clients = [QuittingStepper("s1", quit_after=3), Stepper("s2")]
    bus = InProcBus(Manifest(clients={c.name: c.mode for c in clients}),
                    fast(steps=10))
    for c in clients:
        bus.add_client(c)
    bus.run()
    assert bus.core.aborted
    assert "s1" in bus.core.abort_reason


def test_free_disconnect_continues():
    class QuittingFree(FreeListener):
        def on_message(self, msg):
            super().on_message(msg)
            if msg.step == 2:
                self.session.shutdown()

    clients = [Stepper("s1", topics=("signal/x",)),
               QuittingFree("f1", subscriptions=("signal/#",))]
    bus = run_bus(clients, schedule=fast(steps=6))
    assert bus.core.finished and not bus.core.aborted


def test_stale_step_done_ignored():
    core = BrokerCore(Manifest(clients={"s": STEPPED}), fast(steps=3))
    out = []
    core.attach("c1", out.append)
    core.handle_line("c1", BusMessage(msg_type="REGISTER", sender="s", seq=1,
                                      mode=STEPPED).to_wire())
    # acks a step that is long gone
    core.handle_line("c1", BusMessage(msg_type="STEP_DONE", sender="s", seq=2,
                                      step=99).to_wire())
    assert core.current_step == 1
    assert any(r.kind == "drop" and "stale STEP_DONE" in r.body
               for r in core.event_log.records)


# -- pacing ---------------------------------------------------------------------

def test_paced_mode_waits_for_wall_clock():
    clients = [Stepper("s1")]
    bus = InProcBus(Manifest(clients={"s1": STEPPED}),
                    Schedule(steps=5, step_seconds=0.04, pacing=PACED, speedup=1.0))
    bus.add_client(clients[0])
    t0 = time.monotonic()
    bus.run()
    elapsed = time.monotonic() - t0
    assert elapsed >= 4 * 0.04  # steps 2..5 wait on the clock
    assert clients[0].steps == [1, 2, 3, 4, 5]


def test_fast_mode_does_not_wait():
    clients = [Stepper("s1")]
    bus = InProcBus(Manifest(clients={"s1": STEPPED}),
                    Schedule(steps=200, step_seconds=3600.0, pacing=FAST))
    bus.add_client(clients[0])
    t0 = time.monotonic()
    bus.run()
    assert time.monotonic() - t0 < 5.0


# -- determinism / liveness / replay --------------------------------------------

def make_traffic_clients():
    return [Stepper("grid", topics=("signal/grid/v", "signal/grid/losses")),
            Stepper("conv", topics=("signal/conv/p",),
                    subscriptions=("signal/grid/v",)),
            FreeListener("rec", subscriptions=("signal/#",), publish_every=5,
                         publish_topic="setpoint/g1/q")]


def test_trace_bit_determinism():
    sig = []
    for _ in range(2):
        bus = run_bus(make_traffic_clients(), schedule=fast(steps=20))
        sig.append(bus.core.event_log.signature())
    assert sig[0] == sig[1]


def test_liveness_1440_steps():
    steppers = [Stepper(f"s{i}") for i in range(3)]
    bus = run_bus(steppers, schedule=fast(steps=1440))
    assert bus.core.finished and not bus.core.aborted
    for s in steppers:
        assert s.steps == list(range(1, 1441))


def test_idle_underfilled_barrier_is_detected():
    class NeverAcks(Stepper):
        def on_message(self, msg):
            pass

    bus = InProcBus(Manifest(clients={"dead": STEPPED}), fast(steps=2))
    bus.add_client(NeverAcks("dead"))
    with pytest.raises(RuntimeError, match="did not ack"):
        bus.run()


def test_replay_transcript_reproduces_routing():
    bus = run_bus(make_traffic_clients(), schedule=fast(steps=15))
    live = bus.core
    assert live.transcript
    replayed = replay_transcript(live.transcript, live.manifest, live.schedule)
    assert replayed.event_log.sends() == live.event_log.sends()
    assert replayed.finished and not replayed.aborted


def test_fifo_fuzz_randomized_interleavings():
    """1,000 publishes, randomly interleaved across senders, per-publisher FIFO."""
    rng = random.Random(1234)
    n_pub, n_msgs = 5, 1000
    manifest = Manifest(clients={f"p{i}": FREE for i in range(n_pub)} | {"sub": FREE})
    core = BrokerCore(manifest, fast(steps=1))
    delivered = []
    core.attach("c_sub", delivered.append)
    core.handle_line("c_sub", BusMessage(
        msg_type="REGISTER", sender="sub", seq=1, mode=FREE,
        subs=("fuzz/#",)).to_wire())
    for i in range(n_pub):
        core.attach(f"c{i}", None)
        core.handle_line(f"c{i}", BusMessage(
            msg_type="REGISTER", sender=f"p{i}", seq=1, mode=FREE).to_wire())

    streams = {
        i: [BusMessage(msg_type="PUBLISH", sender=f"p{i}", seq=k + 2,
                       topic=f"fuzz/p{i}/x", step=k, payload=k).to_wire()
            for k in range(n_msgs // n_pub)]
        for i in range(n_pub)
    }
    remaining = {i: list(s) for i, s in streams.items()}
    while any(remaining.values()):
        i = rng.choice([i for i, s in remaining.items() if s])
        core.handle_line(f"c{i}", remaining[i].pop(0))

    by_sender = {}
    for line in delivered:
        msg = BusMessage.from_wire(line)
        if msg.msg_type == "PUBLISH":
            by_sender.setdefault(msg.sender, []).append(msg.seq)
    assert sum(len(v) for v in by_sender.values()) == n_msgs
    for sender, seqs in by_sender.items():
        assert seqs == sorted(seqs), f"reordering for {sender}"
        assert len(set(seqs)) == len(seqs)
