import unittest
import sys
import os

import numpy as np
import simpy
import simpy.rt

# Add the parent directory to sys.path to import the module
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from dapp_manager import decode_submission
from fl_core import DataShard, Shapes, deserialize_params, init_model
from simnet import (
    DeviceActor,
    DeviceRoundConfig,
    DeviceTiming,
    EventLog,
    MessageBus,
    PastTime,
    SimClock,
    build_submissions,
    device_round,
    schedule,
    topic_matches,
    update_topic,
)
from utils import seeded_rng

SHAPES = Shapes(3, 4, 2)
ROUND_CFG = DeviceRoundConfig(exp_id="exp1", epochs=1)


def make_actor(index, adversary=None, timing=None):
    rng = np.random.default_rng(index)
    shard = DataShard(rng.standard_normal((20, SHAPES.input_dim)), np.arange(20) % 2, owner=f"device-{index:02d}")
    return DeviceActor(
        device_id=f"device-{index:02d}",
        shard=shard,
        credential=f"psk-{index}",
        jitter_rng=seeded_rng(7, 0, 3, index),
        timing=timing or DeviceTiming(),
        train_seed=(7, 0, index),
        adversary=adversary,
    )


class TestSimClock(unittest.TestCase):
    """Event ordering on the simulated clock"""

    def test_ties_fire_in_insertion_order(self):
        clock = SimClock()
        fired = []
        schedule(clock, 5.0, lambda: fired.append("a"))
        schedule(clock, 5.0, lambda: fired.append("b"))
        schedule(clock, 1.0, lambda: fired.append("c"))
        clock.run()
        self.assertEqual(fired, ["c", "a", "b"])

    def test_schedule_at_now_fires_before_time_advances(self):
        clock = SimClock()
        seen = []

        def first():
            schedule(clock, clock.now, lambda: seen.append(clock.now))

        schedule(clock, 2.0, first)
        schedule(clock, 3.0, lambda: seen.append(clock.now))
        clock.run()
        self.assertEqual(seen, [2.0, 3.0])

    def test_past_time(self):
        clock = SimClock()
        schedule(clock, 4.0, lambda: None)
        clock.run()
        with self.assertRaises(PastTime):
            schedule(clock, 3.0, lambda: None)

    def test_run_until(self):
        clock = SimClock()
        fired = []
        for t in (1.0, 2.0, 3.0):
            schedule(clock, t, lambda t=t: fired.append(t))
        clock.run(until=2.5)
        self.assertEqual(fired, [1.0, 2.0])
        self.assertEqual(clock.now, 2.5)
        self.assertEqual(clock.pending(), 1)

    def test_time_never_decreases(self):
        clock = SimClock()
        times = []
        rng = np.random.default_rng(0)
        for t in rng.uniform(0, 100, 50):
            schedule(clock, float(t), lambda: times.append(clock.now))
        clock.run()
        self.assertEqual(times, sorted(times))

    def test_requested_times_are_kept_exactly(self):
        clock = SimClock()
        seen = []
        schedule(clock, 0.1, lambda: schedule(clock, 0.3, lambda: seen.append(clock.now)))
        clock.run()
        self.assertEqual(seen, [0.3])
        self.assertEqual(clock.fired, 2)

    def test_runs_on_simpy(self):
        self.assertIsInstance(SimClock().env, simpy.Environment)
        clock = SimClock(realtime=True, speed=1000.0)
        self.assertIsInstance(clock.env, simpy.rt.RealtimeEnvironment)
        fired = []
        schedule(clock, 0.5, lambda: fired.append(clock.now))
        clock.run()
        self.assertEqual(fired, [0.5])

    def test_event_errors_propagate(self):
        clock = SimClock()

        def broken():
            raise RuntimeError("boom")

        schedule(clock, 1.0, broken)
        with self.assertRaises(RuntimeError):
            clock.run()


class TestMessageBus(unittest.TestCase):
    """Topic matching and delivery"""

    def setUp(self):
        self.clock = SimClock()
        self.bus = MessageBus(self.clock, latency_s=0.01)

    def test_no_subscribers(self):
        self.assertEqual(self.bus.publish("fl/exp1/updates/dev7", b"x"), 0)
        self.assertEqual(self.bus.dropped, 1)
        self.assertEqual(self.clock.pending(), 0)

    def test_in_order_after_latency(self):
        received = []
        self.bus.subscribe("fl/exp1/updates/dev7", lambda m: received.append((self.clock.now, m.payload)))
        self.bus.publish("fl/exp1/updates/dev7", b"first")
        self.bus.publish("fl/exp1/updates/dev7", b"second")
        self.clock.run()
        self.assertEqual([p for _, p in received], [b"first", b"second"])
        self.assertAlmostEqual(received[0][0], 0.01)

    def test_wildcards(self):
        self.assertTrue(topic_matches("fl/+/updates/#", "fl/exp1/updates/dev7"))
        self.assertTrue(topic_matches("fl/#", "fl"))
        self.assertTrue(topic_matches("fl/exp1/global/+", "fl/exp1/global/3"))
        self.assertFalse(topic_matches("fl/+/updates", "fl/exp1/updates/dev7"))
        self.assertFalse(topic_matches("fl/+", "fl/exp1/global"))
        self.assertFalse(topic_matches("#", "$SYS/broker"))

    def test_fifo_per_topic_with_interleaved_publishers(self):
        received = {}
        self.bus.subscribe("fl/exp1/updates/+", lambda m: received.setdefault(m.topic, []).append(m.payload))
        rng = np.random.default_rng(3)
        sent = {}

        def publish(topic, payload):
            sent.setdefault(topic, []).append(payload)
            self.bus.publish(topic, payload)

        for i in range(40):
            topic = update_topic("exp1", f"dev{int(rng.integers(0, 3))}")
            schedule(self.clock, float(rng.uniform(0, 1)), lambda t=topic, i=i: publish(t, str(i).encode()))
        self.clock.run()
        self.assertEqual(received, sent)

    def test_unsubscribe(self):
        received = []
        sub = self.bus.subscribe("fl/#", lambda m: received.append(m))
        self.bus.publish("fl/a", b"1")
        self.bus.unsubscribe(sub)
        self.clock.run()
        self.assertEqual(received, [])


class TestDeviceRound(unittest.TestCase):
    """Device actors training and publishing on schedule"""

    def test_zero_delays_publish_at_round_start(self):
        timing = DeviceTiming(compute_base_s=0.0, cold_start_base_s=0.0, network_delay_s=0.0)
        actor = make_actor(0, timing=timing)
        clock = SimClock()
        scheduled = device_round(actor, init_model(0, SHAPES), 1, ROUND_CFG, clock, MessageBus(clock))
        self.assertEqual(scheduled.at, 0.0)
        self.assertEqual(scheduled.topic, "fl/exp1/updates/device-00")

    def test_cold_start_only_on_first_round(self):
        actor = make_actor(1, timing=DeviceTiming(compute_base_s=0.0, cold_start_base_s=4.0))
        self.assertGreater(actor.compute_delay(1), 0.0)
        self.assertEqual(actor.compute_delay(2), 0.0)

    def _arrival_log(self):
        clock = SimClock()
        bus = MessageBus(clock)
        events = EventLog()
        arrivals = []
        bus.subscribe("fl/exp1/updates/+", lambda m: arrivals.append(m.topic))
        global_params = init_model(0, SHAPES)
        for i in range(20):
            device_round(make_actor(i), global_params, 1, ROUND_CFG, clock, bus, events)
        clock.run()
        return arrivals, events.lines()

    def test_seeded_arrival_order_is_stable(self):
        first_arrivals, first_lines = self._arrival_log()
        second_arrivals, second_lines = self._arrival_log()
        self.assertEqual(len(first_arrivals), 20)
        self.assertEqual(first_arrivals, second_arrivals)
        self.assertEqual(first_lines, second_lines)


class TestAdversaries(unittest.TestCase):
    """What each adversary model sends"""

    def setUp(self):
        self.global_params = init_model(0, SHAPES)

    def test_random_weights_have_correct_shape(self):
        subs = build_submissions(make_actor(3, "random-weights"), self.global_params, 2, ROUND_CFG)
        self.assertEqual(len(subs), 1)
        params = deserialize_params(subs[0].blob)
        self.assertEqual(params.shapes, SHAPES)
        self.assertTrue(params.is_finite())
        self.assertNotEqual(params, self.global_params)

    def test_nan_weights(self):
        subs = build_submissions(make_actor(3, "nan-weights"), self.global_params, 1, ROUND_CFG)
        self.assertFalse(deserialize_params(subs[0].blob).is_finite())

    def test_duplicate_spam(self):
        subs = build_submissions(make_actor(3, "duplicate-spam"), self.global_params, 1, ROUND_CFG)
        self.assertEqual(len(subs), 1 + ROUND_CFG.duplicate_copies)
        self.assertEqual(len(set(subs)), 1)

    def test_stale_replay_sends_previous_round(self):
        actor = make_actor(3, "stale-replay")
        first = build_submissions(actor, self.global_params, 1, ROUND_CFG)[0]
        second = build_submissions(actor, self.global_params, 2, ROUND_CFG)[0]
        self.assertEqual(first.round, 0)
        self.assertEqual(second.round, 1)

    def test_honest_payload_decodes(self):
        clock = SimClock()
        scheduled = device_round(make_actor(2), self.global_params, 1, ROUND_CFG, clock, MessageBus(clock))
        sub = decode_submission(scheduled.payloads[0])
        self.assertEqual(sub.device_id, "device-02")
        self.assertEqual(sub.round, 1)
        self.assertEqual(sub.n_samples, 20)


if __name__ == "__main__":
    unittest.main()
