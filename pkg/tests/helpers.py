"""Scripted bus clients shared by the bus/TCP/experiment tests."""

import time

from cellgrid.bus import FREE, STEPPED, BusClient


class Stepper(BusClient):
    """Acks every STEP, optionally publishing first and/or sleeping."""

    mode = STEPPED

    def __init__(self, name, topics=(), delay=0.0, subscriptions=()):
        super().__init__(name)
        self.topics = tuple(topics)
        self.delay = delay
        self.subscriptions = tuple(subscriptions)
        self.steps = []
        self.received = []

    def on_message(self, msg):
        if msg.msg_type == "STEP":
            if self.delay:
                time.sleep(self.delay)
            self.steps.append(msg.step)
            for topic in self.topics:
                self.session.publish(topic, msg.step, float(msg.step))
            self.session.step_done(msg.step)
        elif msg.msg_type == "PUBLISH":
            self.received.append((msg.sender, msg.topic, msg.step, msg.payload))


class FreeListener(BusClient):
    """Free-running subscriber; optionally publishes every nth observed step."""

    mode = FREE

    def __init__(self, name, subscriptions=("signal/#",), publish_every=0,
                 publish_topic="free/out"):
        super().__init__(name)
        self.subscriptions = tuple(subscriptions)
        self.publish_every = publish_every
        self.publish_topic = publish_topic
        self.received = []
        self.errors = []

    def on_message(self, msg):
        if msg.msg_type != "PUBLISH":
            return
        self.received.append((msg.sender, msg.topic, msg.step, msg.payload, msg.seq))
        if (self.publish_every and msg.step is not None
                and msg.step % self.publish_every == 0):
            self.session.publish(self.publish_topic, msg.step, 1.0)

    def on_error(self, error):
        self.errors.append(error)


class QuittingStepper(Stepper):
    """Leaves the experiment (SHUTDOWN) after acking `quit_after` steps."""

    def __init__(self, name, quit_after):
        super().__init__(name)
        self.quit_after = quit_after

    def on_message(self, msg):
        super().on_message(msg)
        if msg.msg_type == "STEP" and msg.step == self.quit_after:
            self.session.shutdown()
