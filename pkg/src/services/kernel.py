import enum
import itertools
import logging
import math
from collections.abc import Callable, Generator
from dataclasses import dataclass

import numpy as np
import simpy

from src.schemas.scenario import LatencyConfig, LatencyRange
from src.services.partitioning import stable_hash

logger = logging.getLogger(__name__)


class EventKind(str, enum.Enum):
    rpc_arrival = "rpc-arrival"
    rpc_complete = "rpc-complete"
    cold_start_done = "cold-start-done"
    timeout = "timeout"
    instance_reclaim = "instance-reclaim"
    instance_crash = "instance-crash"
    interval_tick = "interval-tick"


class LatencyKind(str, enum.Enum):
    tcp = "tcp"
    http = "http"
    store = "store"
    cold_start = "cold_start"
    service = "service"


@dataclass(eq = False)
class EventHandle:
    fire_at: int
    seq: int
    kind: EventKind
    cancelled: bool = False
    dispatched: bool = False

    def cancel(self) -> None:
        self.cancelled = True


def sample_latency(latency_range: LatencyRange, rng: np.random.Generator) -> int:
    """Uniform integer draw in [min_us, max_us], both ends inclusive."""
    if latency_range.min_us == latency_range.max_us:
        return latency_range.min_us
    return int(rng.integers(latency_range.min_us, latency_range.max_us, endpoint = True))


class SimKernel:
    """
    Deterministic discrete-event engine for one simulation run.

    Time is virtual, in integer microseconds. Scheduling goes through a simpy Environment whose
    queue orders events by (time, priority, insertion id); ``schedule`` adds cancellable handles
    on top. Actor processes use ``sleep`` / ``event`` / ``process`` directly.
    """

    def __init__(self, seed: int, latency: LatencyConfig | None = None):
        self.env = simpy.Environment(initial_time = 0)
        self.seed = seed
        self.latency = latency or LatencyConfig()
        self.dispatched = 0
        self.event_log: list[str] = []
        self._seq = itertools.count(1)

    @property
    def now(self) -> int:
        return int(self.env.now)

    def schedule(self, delay: int, kind: EventKind,
                 callback: Callable[[EventHandle], None] | None = None) -> EventHandle:
        handle, _ = self._arm(delay, kind, callback)
        return handle

    def timer(self, delay: float, kind: EventKind) -> simpy.Timeout:
        """
        A logged sleep: the returned timeout fires after ``delay`` and its dispatch lands in
        ``event_log`` before the waiting process resumes.

        >>> kernel = SimKernel(seed = 1)
        >>> _ = kernel.timer(5, EventKind.interval_tick)
        >>> kernel.run_until(10), kernel.event_log
        (1, ['5 1 interval-tick'])
        """
        _, timeout = self._arm(max(0, int(math.ceil(delay))), kind, None)
        return timeout

    def _arm(self, delay: int, kind: EventKind,
             callback: Callable[[EventHandle], None] | None) -> tuple[EventHandle, simpy.Timeout]:
        if delay < 0:
            raise ValueError(f"cannot schedule into the past (delay={delay})")
        delay = int(delay)
        handle = EventHandle(fire_at = self.now + delay, seq = next(self._seq), kind = kind)
        timeout = self.env.timeout(delay)
        timeout.callbacks.append(lambda _event: self._dispatch(handle, callback))
        return handle, timeout

    def _dispatch(self, handle: EventHandle, callback: Callable[[EventHandle], None] | None) -> None:
        if handle.cancelled:
            return
        handle.dispatched = True
        self.dispatched += 1
        self.event_log.append(f"{handle.fire_at} {handle.seq} {handle.kind.value}")
        if callback is not None:
            callback(handle)

    def run_until(self, end: int) -> int:
        """
        The run_until function dispatches every queued event due at or before ``end`` and leaves
        the clock at ``end``.

        :param end: int: Virtual time in µs, not before now
        :return: Number of scheduled handles dispatched during the call
        """
        if end < self.now:
            raise ValueError(f"end {end} is before now {self.now}")
        before = self.dispatched
        while self.env.peek() <= end:
            self.env.step()
        if self.now < end:
            self.env.run(until = end)
        return self.dispatched - before

    def sleep(self, delay: float) -> simpy.Timeout:
        return self.env.timeout(max(0, int(math.ceil(delay))))

    def event(self) -> simpy.Event:
        return self.env.event()

    def process(self, generator: Generator) -> simpy.Process:
        return self.env.process(generator)

    def any_of(self, events) -> simpy.events.AnyOf:
        return simpy.AnyOf(self.env, events)

    def all_of(self, events) -> simpy.events.AllOf:
        return simpy.AllOf(self.env, events)

    def rng(self, actor_kind: str, actor_index: int = 0) -> np.random.Generator:
        """
        One random stream per actor, derived from the master seed and the actor identity, so adding
        a client does not perturb the draws of another.
        """
        sequence = np.random.SeedSequence(entropy = self.seed,
                                          spawn_key = (stable_hash(actor_kind) & 0xFFFFFFFF, actor_index))
        return np.random.default_rng(sequence)

    def sample_latency(self, kind: LatencyKind, rng: np.random.Generator) -> int:
        return sample_latency(getattr(self.latency, kind.value), rng)
