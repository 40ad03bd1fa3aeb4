"""
Discrete-event fabric for the simulation: a seeded clock, an MQTT-style topic bus, the event log
and the IoT device actors.
"""
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import simpy
import simpy.rt

from config import Config
from dapp_manager import Submission, encode_submission
from fl_core import DataShard, ModelParams, TrainConfig, local_train, random_params, serialize_params
from utils import digest_hex, quantize_time, seeded_rng

logger = logging.getLogger(__name__)

EPS = 1e-12


class SimError(Exception):
    """Base class for simulation errors."""


class PastTime(SimError):
    pass


class SimClock:
    """
    Scheduler on a simpy environment. Events fire in (time, insertion) order since simpy breaks
    ties between equal-priority events by event id. Time never decreases. In realtime mode the
    environment is a `simpy.rt.RealtimeEnvironment` paced by `speed`.
    """

    def __init__(self, realtime: bool = False, speed: float = 1.0):
        self.realtime = realtime
        self.speed = speed
        if realtime:
            self.env = simpy.rt.RealtimeEnvironment(factor=1.0 / speed, strict=False)
        else:
            self.env = simpy.Environment()
        self._now = 0.0
        self._pending = 0
        self.fired = 0

    @property
    def now(self) -> float:
        return self._now

    def schedule(self, at: float, event: Callable[[], None]) -> None:
        if at < self._now - EPS:
            raise PastTime(f"cannot schedule at t={at:.6f}, clock is at t={self._now:.6f}")
        at = max(at, self._now)
        timeout = self.env.timeout(max(0.0, at - self.env.now))
        timeout.callbacks.append(lambda _: self._fire(at, event))
        self._pending += 1

    def _fire(self, at: float, event: Callable[[], None]) -> None:
        # keep the requested time exactly; env.now may differ from it in the last ulp
        self._now = max(self._now, at)
        self._pending -= 1
        self.fired += 1
        event()

    def pending(self) -> int:
        return self._pending

    def step(self) -> bool:
        if self.env.peek() == simpy.core.Infinity:
            return False
        self.env.step()
        return True

    def run(self, until: Optional[float] = None) -> int:
        """Fire events in order until the queue drains or the next event lies past `until`."""
        before = self.fired
        if until is None:
            while self.step():
                pass
            return self.fired - before
        while self.env.peek() <= until:
            self.env.step()
        if until > self.env.now:
            self.env.run(until=until)
        self._now = max(self._now, until)
        return self.fired - before


def schedule(clock: SimClock, at: float, event: Callable[[], None]) -> None:
    clock.schedule(at, event)


@dataclass(frozen=True)
class EventRecord:
    t: float
    actor: str
    event: str
    digest: str = ""

    def to_line(self) -> str:
        return json.dumps({"actor": self.actor, "digest": self.digest, "event": self.event, "t": self.t},
                          sort_keys=True, separators=(",", ":"))


class EventLog:
    """Append-only record of what happened when; exported one JSON object per line."""

    def __init__(self):
        self.records: List[EventRecord] = []

    def record(self, t: float, actor: str, kind: str, digest: str = "") -> EventRecord:
        entry = EventRecord(quantize_time(t), actor, kind, digest)
        self.records.append(entry)
        return entry

    def lines(self) -> List[str]:
        return [r.to_line() for r in self.records]

    def of_kind(self, kind: str) -> List[EventRecord]:
        return [r for r in self.records if r.event == kind]

    @classmethod
    def from_lines(cls, lines: List[str]) -> "EventLog":
        log = cls()
        for line in lines:
            d = json.loads(line)
            log.records.append(EventRecord(float(d["t"]), d["actor"], d["event"], d.get("digest", "")))
        return log

    def __len__(self) -> int:
        return len(self.records)


# --- MQTT-style bus ---

def topic_matches(pattern: str, topic: str) -> bool:
    """
    MQTT filter matching: `+` matches exactly one level, a trailing `#` matches the parent level and
    everything below it. Wildcards never match topics starting with `$`.
    """
    if not pattern or not topic:
        return False
    if topic.startswith("$") and pattern[0] in "+#":
        return False
    p_levels = pattern.split("/")
    t_levels = topic.split("/")
    for i, p in enumerate(p_levels):
        if p == "#":
            return i == len(p_levels) - 1
        if i >= len(t_levels):
            return False
        if p != "+" and p != t_levels[i]:
            return False
    return len(p_levels) == len(t_levels)


@dataclass(frozen=True)
class TopicMessage:
    topic: str
    payload: bytes
    publish_time: float


@dataclass
class Subscription:
    pattern: str
    callback: Callable[[TopicMessage], None]
    sub_id: int
    active: bool = True


class MessageBus:
    """
    In-process broker with QoS 0 semantics: messages reach every matching subscriber after the bus
    latency, FIFO per topic, and are dropped when nobody matches.
    """

    def __init__(self, clock: SimClock, latency_s: float = Config.BUS_LATENCY_S):
        self.clock = clock
        self.latency_s = latency_s
        self._subs: List[Subscription] = []
        self._ids = itertools.count(1)
        self._last_delivery: Dict[str, float] = {}
        self.published = 0
        self.dropped = 0

    def subscribe(self, pattern: str, callback: Callable[[TopicMessage], None]) -> Subscription:
        if not pattern:
            raise ValueError("topic filter must be non-empty")
        sub = Subscription(pattern, callback, next(self._ids))
        self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        sub.active = False
        self._subs = [s for s in self._subs if s is not sub]

    def publish(self, topic: str, payload: bytes) -> int:
        """Queue delivery to every matching subscriber; returns how many matched."""
        if not topic:
            raise ValueError("topic must be non-empty")
        self.published += 1
        matched = [s for s in self._subs if topic_matches(s.pattern, topic)]
        if not matched:
            self.dropped += 1
            return 0
        message = TopicMessage(topic, bytes(payload), self.clock.now)
        deliver_at = max(self.clock.now + self.latency_s, self._last_delivery.get(topic, 0.0))
        self._last_delivery[topic] = deliver_at
        for sub in matched:
            self.clock.schedule(deliver_at, lambda s=sub: s.active and s.callback(message))
        return len(matched)


def update_topic(exp_id: str, device_id: str) -> str:
    return f"fl/{exp_id}/updates/{device_id}"


def global_topic(exp_id: str, round_index: int) -> str:
    return f"fl/{exp_id}/global/{round_index}"


# --- Devices ---

@dataclass
class DeviceTiming:
    compute_base_s: float = Config.COMPUTE_BASE_S
    compute_sigma: float = Config.COMPUTE_SIGMA
    cold_start_base_s: float = Config.COLD_START_BASE_S
    cold_start_sigma: float = Config.COLD_START_SIGMA
    network_delay_s: float = Config.NETWORK_DELAY_S


@dataclass
class DeviceActor:
    device_id: str
    shard: DataShard
    credential: str
    jitter_rng: np.random.Generator
    timing: DeviceTiming = field(default_factory=DeviceTiming)
    train_seed: Tuple[int, ...] = (0,)
    adversary: Optional[str] = None
    last_submission: Optional[Submission] = None

    def compute_delay(self, round_index: int) -> float:
        """
        Lognormal jitter around the compute base, plus the cold-start connection and model download
        on the first round.
        """
        t = self.timing
        delay = 0.0
        if round_index == 1:
            delay += t.cold_start_base_s * self.jitter_rng.lognormal(0.0, t.cold_start_sigma)
        delay += t.compute_base_s * self.jitter_rng.lognormal(0.0, t.compute_sigma)
        return delay


@dataclass(frozen=True)
class ScheduledSubmission:
    at: float
    topic: str
    payloads: Tuple[bytes, ...]


@dataclass(frozen=True)
class DeviceRoundConfig:
    exp_id: str
    epochs: int = Config.LOCAL_EPOCHS
    learning_rate: float = Config.LEARNING_RATE
    batch_size: int = Config.BATCH_SIZE
    duplicate_copies: int = Config.DUPLICATE_COPIES
    random_weight_scale: float = Config.RANDOM_WEIGHT_SCALE


def _train(actor: DeviceActor, global_params: ModelParams, round_index: int, cfg: DeviceRoundConfig):
    train_cfg = TrainConfig(cfg.epochs, cfg.learning_rate, cfg.batch_size, seed=tuple(actor.train_seed) + (round_index,))
    return local_train(global_params, actor.shard, train_cfg)


def build_submissions(actor: DeviceActor, global_params: ModelParams, round_index: int,
                      cfg: DeviceRoundConfig) -> List[Submission]:
    """The submission(s) a device sends for one round, honest or per its adversary model."""
    kind = actor.adversary
    if kind == "random-weights":
        rng = seeded_rng(*actor.train_seed, round_index, 1)
        params = random_params(global_params.shapes, rng, cfg.random_weight_scale)
        return [_submission(actor, round_index, params, actor.shard.n_samples)]
    if kind == "stale-replay":
        # trains honestly but always sends last round's update
        update = _train(actor, global_params, round_index, cfg)
        previous = actor.last_submission
        if previous is None:
            previous = _submission(actor, round_index - 1, global_params, actor.shard.n_samples)
        actor.last_submission = _submission(actor, round_index, update.params, update.n_samples)
        return [previous]

    update = _train(actor, global_params, round_index, cfg)
    params = update.params
    if kind == "nan-weights":
        weights = params.weights.copy()
        weights[::7] = np.nan
        params = ModelParams(params.shapes, weights)
    honest = _submission(actor, round_index, params, update.n_samples)
    if kind == "duplicate-spam":
        return [honest] * (1 + cfg.duplicate_copies)
    return [honest]


def _submission(actor: DeviceActor, round_index: int, params: ModelParams, n_samples: int) -> Submission:
    return Submission(actor.device_id, actor.credential, round_index, n_samples, params.shapes,
                      serialize_params(params))


def device_round(actor: DeviceActor, global_params: ModelParams, round_index: int, cfg: DeviceRoundConfig,
                 clock: SimClock, bus: MessageBus, events: Optional[EventLog] = None) -> ScheduledSubmission:
    """
    Train on the local shard now and publish the result to the device's update topic after the
    compute and network delays.
    """
    submissions = build_submissions(actor, global_params, round_index, cfg)
    at = clock.now + actor.compute_delay(round_index) + actor.timing.network_delay_s
    topic = update_topic(cfg.exp_id, actor.device_id)
    payloads = tuple(encode_submission(s) for s in submissions)

    def send():
        for payload in payloads:
            if events is not None:
                events.record(clock.now, actor.device_id, "update_published", digest_hex(payload))
            bus.publish(topic, payload)

    clock.schedule(at, send)
    return ScheduledSubmission(at, topic, payloads)
