import enum
import logging
import math
from collections import deque
from collections.abc import Callable, Generator
from dataclasses import dataclass, field

import numpy as np
import simpy

from src.schemas.scenario import PlatformConfig, seconds_to_us
from src.services.cache import CacheTrie
from src.services.kernel import EventKind, LatencyKind, SimKernel

logger = logging.getLogger(__name__)


class InstanceState(str, enum.Enum):
    cold_starting = "cold-starting"
    warm_idle = "warm-idle"
    busy = "busy"
    terminated = "terminated"


@dataclass(eq = False)
class FunctionInstance:
    instance_id: str
    deployment: int
    index: int
    concurrency_limit: int
    vcpus: float
    mem_gb: float
    cache: CacheTrie
    cpu: simpy.Resource
    rng: np.random.Generator
    started_at: int
    ready: simpy.Event
    warm: bool = False
    terminated_at: int | None = None
    last_active: int = 0
    concurrency_used: int = 0
    in_flight: int = 0
    busy_since: int | None = None
    busy_intervals: list[tuple[int, int]] = field(default_factory = list)
    processes: dict = field(default_factory = dict)
    tcp_peers: set[str] = field(default_factory = set)
    result_cache: dict[str, tuple[object, int]] = field(default_factory = dict)
    handler: object = None

    @property
    def state(self) -> InstanceState:
        if self.terminated_at is not None:
            return InstanceState.terminated
        if not self.warm:
            return InstanceState.cold_starting
        return InstanceState.busy if self.in_flight else InstanceState.warm_idle

    @property
    def live(self) -> bool:
        return self.terminated_at is None

    def begin_work(self, now: int) -> None:
        if self.in_flight == 0:
            self.busy_since = now
        self.in_flight += 1
        self.last_active = now

    def end_work(self, now: int) -> None:
        if self.in_flight == 0:
            return
        self.in_flight -= 1
        self.last_active = now
        if self.in_flight == 0 and self.busy_since is not None:
            self.busy_intervals.append((self.busy_since, now))
            self.busy_since = None

    def lifetime(self, end: int) -> tuple[int, int]:
        return self.started_at, self.terminated_at if self.terminated_at is not None else end

    def cached_result(self, request_id: str, now: int):
        entry = self.result_cache.get(request_id)
        if entry is None:
            return None
        response, expires_at = entry
        if now >= expires_at:
            del self.result_cache[request_id]
            return None
        return response

    def remember_result(self, request_id: str, response, expires_at: int) -> None:
        self.result_cache[request_id] = (response, expires_at)


@dataclass(eq = False)
class _Queued:
    admitted: simpy.Event
    enqueued_at: int


def predict_instances(rate: float, replacement_probability: float, service_s: float, concurrency_level: int) -> int:
    """
    Reconstructed steady-state scale estimate: HTTP arrivals (rate × p) times mean HTTP service
    time is the number of concurrently busy HTTP slots; each instance contributes
    ``concurrency_level`` slots. This is an approximation of the platform's scaling behavior,
    not a formula the platform enforces.

    >>> predict_instances(25000, 0.01, 0.02, 4)
    2
    >>> predict_instances(0, 0.01, 0.02, 4)
    0
    """
    if concurrency_level < 1:
        raise ValueError("concurrency level must be at least 1")
    return math.ceil(rate * replacement_probability * service_s / concurrency_level)


class Platform:
    """
    Emulated FaaS platform: ``n`` deployments, dynamically sized instance pools, cold starts,
    per-instance HTTP concurrency slots, a FIFO invoker queue per deployment, idle reclamation
    and a global vCPU budget.
    """

    def __init__(self, kernel: SimKernel, settings: PlatformConfig, cache_capacity: int | None = None):
        self.kernel = kernel
        self.settings = settings
        self.cache_capacity = cache_capacity
        self.rng = kernel.rng("platform")
        self.instances: dict[str, FunctionInstance] = {}
        self.pools: list[list[FunctionInstance]] = [[] for _ in range(settings.n_deployments)]
        self.queues: list[deque[_Queued]] = [deque() for _ in range(settings.n_deployments)]
        self.on_join: list[Callable[[FunctionInstance], None]] = []
        self.on_leave: list[Callable[[FunctionInstance], None]] = []
        self.handler_factory: Callable[[FunctionInstance], object] | None = None
        self.http_invocations = 0
        self.tcp_requests = 0
        self.cold_starts = 0
        self.terminations = 0
        self.evictions = 0
        self._spawned = [0] * settings.n_deployments
        self._vcpu_in_use = 0.0
        self._reclaimer = None

    # ---- observation

    @property
    def n_deployments(self) -> int:
        return self.settings.n_deployments

    @property
    def vcpu_in_use(self) -> float:
        return self._vcpu_in_use

    def live_instances(self, deployment: int | None = None) -> list[FunctionInstance]:
        pools = self.pools if deployment is None else [self.pools[deployment]]
        return [instance for pool in pools for instance in pool if instance.live]

    def warm_instances(self, deployment: int) -> list[FunctionInstance]:
        return [instance for instance in self.pools[deployment] if instance.live and instance.warm]

    def active_counts(self) -> tuple[list[int], float]:
        """Per-deployment live instance counts and the total vCPU they hold."""
        counts = [len(self.live_instances(deployment)) for deployment in range(self.n_deployments)]
        return counts, self._vcpu_in_use

    def queued(self) -> int:
        return sum(len(queue) for queue in self.queues)

    def trace_row(self) -> dict:
        counts, vcpu = self.active_counts()
        row = {"t": self.kernel.now // 1_000_000}
        row.update({f"d{deployment}": count for deployment, count in enumerate(counts)})
        row.update({"instances": sum(counts), "vcpu": vcpu, "queued": self.queued()})
        return row

    # ---- lifecycle

    def _can_start(self, deployment: int) -> bool:
        cap = self.settings.max_instances_per_deployment
        if cap is not None and len(self.live_instances(deployment)) >= cap:
            return False
        return self._vcpu_in_use + self.settings.per_instance_vcpu <= self.settings.vcpu_budget + 1e-9

    def _spawn(self, deployment: int, warm: bool) -> FunctionInstance:
        index = self._spawned[deployment]
        self._spawned[deployment] += 1
        now = self.kernel.now
        instance = FunctionInstance(
            instance_id = f"nn-{deployment}-{index}",
            deployment = deployment,
            index = index,
            concurrency_limit = self.settings.concurrency_level,
            vcpus = self.settings.per_instance_vcpu,
            mem_gb = self.settings.mem_gb,
            cache = CacheTrie(self.cache_capacity),
            cpu = simpy.Resource(self.kernel.env, capacity = self.settings.cpu_slots),
            rng = self.kernel.rng(f"instance-{deployment}", index),
            started_at = now,
            ready = self.kernel.event(),
            last_active = now,
        )
        if self.handler_factory is not None:
            instance.handler = self.handler_factory(instance)
        self.instances[instance.instance_id] = instance
        self.pools[deployment].append(instance)
        self._vcpu_in_use += instance.vcpus
        if warm:
            self._warm_up(instance)
        else:
            self.cold_starts += 1
            logger.info("t=%d cold start %s", now, instance.instance_id)
            self.kernel.process(self._cold_start(instance))
        return instance

    def _cold_start(self, instance: FunctionInstance) -> Generator:
        yield self.kernel.timer(self.kernel.sample_latency(LatencyKind.cold_start, self.rng), EventKind.cold_start_done)
        if instance.live:
            self._warm_up(instance)
            self._pump(instance.deployment)

    def _warm_up(self, instance: FunctionInstance) -> None:
        instance.warm = True
        instance.last_active = self.kernel.now
        instance.ready.succeed(instance)
        for listener in self.on_join:
            listener(instance)

    def prewarm(self, per_deployment: int | None = None) -> list[FunctionInstance]:
        count = self.settings.prewarm_per_deployment if per_deployment is None else per_deployment
        started = []
        for _ in range(count):
            for deployment in range(self.n_deployments):
                if self._can_start(deployment):
                    started.append(self._spawn(deployment, warm = True))
        return started

    def terminate_instance(self, instance_id: str, reason: str = "terminated") -> None:
        """
        The terminate_instance function kills one instance: in-flight handler processes are
        interrupted (their callers see timeouts), listeners learn of the departure so the
        coordinator and store can drop its rounds, transactions and connections.

        :param instance_id: str: Live instance to kill
        :param reason: str: Logged cause
        :return: None
        """
        instance = self.instances.get(instance_id)
        if instance is None or not instance.live:
            raise KeyError(f"instance {instance_id} is not live")
        now = self.kernel.now
        if instance.busy_since is not None:
            instance.busy_intervals.append((instance.busy_since, now))
            instance.busy_since = None
        instance.terminated_at = now
        instance.in_flight = 0
        instance.concurrency_used = 0
        self._vcpu_in_use -= instance.vcpus
        self.terminations += 1
        logger.info("t=%d %s %s", now, reason, instance_id)
        for process in list(instance.processes):
            if process.is_alive:
                process.interrupt(reason)
        instance.processes.clear()
        if instance.warm:
            for listener in self.on_leave:
                listener(instance)
        instance.tcp_peers.clear()
        for deployment in range(self.n_deployments):
            self._pump(deployment)

    def reclaim_idle(self, now: int | None = None) -> list[FunctionInstance]:
        now = self.kernel.now if now is None else now
        idle_timeout = seconds_to_us(self.settings.idle_timeout_s)
        victims = [instance for instance in self.live_instances()
                   if instance.warm and instance.in_flight == 0 and now - instance.last_active > idle_timeout]
        for instance in victims:
            self.terminate_instance(instance.instance_id, reason = "reclaimed idle")
        return victims

    def start_reclaimer(self) -> None:
        if self._reclaimer is None:
            self._reclaimer = self.kernel.process(self._reclaim_loop())

    def _reclaim_loop(self) -> Generator:
        interval = seconds_to_us(self.settings.reclaim_interval_s)
        while True:
            yield self.kernel.timer(interval, EventKind.instance_reclaim)
            self.reclaim_idle()

    # ---- routing

    def _free_instance(self, deployment: int) -> FunctionInstance | None:
        candidates = [instance for instance in self.warm_instances(deployment)
                      if instance.concurrency_used < instance.concurrency_limit]
        if not candidates:
            return None
        return min(candidates, key = lambda instance: (instance.concurrency_used, instance.index))

    def _evict_for(self, deployment: int) -> bool:
        others = [instance for instance in self.live_instances() if instance.deployment != deployment]
        if not others:
            return False
        victim = min(others, key = lambda instance: (instance.in_flight > 0, instance.last_active, instance.index))
        self.evictions += 1
        self.terminate_instance(victim.instance_id, reason = "evicted to admit")
        return True

    def _admit(self, deployment: int) -> FunctionInstance | simpy.Event | None:
        instance = self._free_instance(deployment)
        if instance is not None:
            instance.concurrency_used += 1
            return instance
        if not self._can_start(deployment) and self.settings.evict_to_admit:
            cap = self.settings.max_instances_per_deployment
            if cap is None or len(self.live_instances(deployment)) < cap:
                self._evict_for(deployment)
        if self._can_start(deployment):
            instance = self._spawn(deployment, warm = False)
            instance.concurrency_used += 1
            return instance
        return None

    def _pump(self, deployment: int) -> None:
        queue = self.queues[deployment]
        while queue:
            instance = self._free_instance(deployment)
            if instance is None and self._can_start(deployment):
                instance = self._spawn(deployment, warm = False)
            if instance is None:
                return
            entry = queue.popleft()
            instance.concurrency_used += 1
            entry.admitted.succeed(instance)

    def invoke_http(self, deployment: int, rng: np.random.Generator | None = None) -> Generator:
        """
        The invoke_http function models one trip through the FaaS gateway: HTTP latency, then
        routing to a warm instance with a free concurrency slot, else a new cold-started instance
        if the budget allows, else FIFO queueing at the deployment's invoker.

        :param deployment: int: Target deployment
        :param rng: np.random.Generator: Caller's random stream for the latency draw
        :return: The warm instance holding one of its concurrency slots for this request
        """
        if not 0 <= deployment < self.n_deployments:
            raise ValueError(f"deployment {deployment} outside [0, {self.n_deployments})")
        yield self.kernel.timer(self.kernel.sample_latency(LatencyKind.http, rng or self.rng), EventKind.rpc_arrival)
        self.http_invocations += 1
        admitted = self._admit(deployment)
        if admitted is None:
            entry = _Queued(admitted = self.kernel.event(), enqueued_at = self.kernel.now)
            self.queues[deployment].append(entry)
            try:
                admitted = yield entry.admitted
            finally:
                if not entry.admitted.triggered and entry in self.queues[deployment]:
                    self.queues[deployment].remove(entry)
        if not admitted.warm:
            yield admitted.ready
        return admitted

    def release_slot(self, instance: FunctionInstance) -> None:
        if instance.concurrency_used > 0:
            instance.concurrency_used -= 1
        if instance.live:
            self._pump(instance.deployment)

    def serve(self, instance: FunctionInstance, work: Generator) -> simpy.Process:
        """Runs ``work`` on the instance so that terminating the instance interrupts it."""
        return self.kernel.process(self._guarded(instance, work))

    def _guarded(self, instance: FunctionInstance, work: Generator) -> Generator:
        me = self.kernel.env.active_process
        if not instance.live:
            return None
        instance.processes[me] = None
        instance.begin_work(self.kernel.now)
        try:
            return (yield from work)
        except simpy.Interrupt:
            return None
        finally:
            instance.processes.pop(me, None)
            if instance.live:
                instance.end_work(self.kernel.now)

    def cpu_burst(self, instance: FunctionInstance, rng: np.random.Generator | None = None) -> Generator:
        with instance.cpu.request() as slot:
            yield slot
            yield self.kernel.sleep(self.kernel.sample_latency(LatencyKind.service, rng or instance.rng))
