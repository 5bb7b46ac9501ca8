import enum
import itertools
import logging
import math
from collections import deque
from collections.abc import Generator
from dataclasses import dataclass, field

import numpy as np

from src.exceptions import GiveUp, OperationFailed
from src.schemas.rpc import ResponseStatus, RpcRequest, RpcResponse, Via
from src.schemas.scenario import OpKind, PolicyConfig, ms_to_us
from src.services.kernel import EventKind, LatencyKind, SimKernel
from src.services.namenode import routing_deployment
from src.services.platform import FunctionInstance, Platform

logger = logging.getLogger(__name__)


class ClientMode(str, enum.Enum):
    normal = "normal"
    anti_thrash = "anti-thrash"


class StragglerDecision(str, enum.Enum):
    keep = "keep"
    cancel_and_resubmit = "cancel_and_resubmit"


def next_backoff(attempt: int, rng: np.random.Generator, base_us: int = 50_000, cap_us: int = 5_000_000) -> int:
    """
    The next_backoff function draws a full-jitter exponential backoff.

    :param attempt: int: Attempt that just failed, starting at 1
    :param rng: np.random.Generator: Caller's random stream
    :param base_us: int: Ceiling of the first backoff
    :param cap_us: int: Ceiling of every backoff
    :return: Sleep duration in µs, uniform in [0, min(cap, base·2^(attempt−1))]
    """
    if attempt < 1:
        raise ValueError(f"attempt must be at least 1, got {attempt}")
    ceiling = min(cap_us, base_us * 2 ** min(attempt - 1, 62))
    return int(rng.integers(0, ceiling, endpoint = True))


def check_straggler(elapsed_us: float, window_avg_us: float | None, k: float = 10.0) -> StragglerDecision:
    """
    >>> check_straggler(50_000, 5_000).value
    'cancel_and_resubmit'
    >>> check_straggler(49_000, 5_000).value
    'keep'
    >>> check_straggler(10**9, None).value
    'keep'
    """
    if not window_avg_us:
        return StragglerDecision.keep
    if elapsed_us >= k * window_avg_us:
        return StragglerDecision.cancel_and_resubmit
    return StragglerDecision.keep


@dataclass
class LatencyTracker:
    """Moving window of completed-request latencies and the anti-thrashing mode it drives."""
    window_size: int = 100
    threshold: float = 2.5
    enabled: bool = True
    window: deque = field(default_factory = deque)
    mode: ClientMode = ClientMode.normal
    pre_entry_avg: float | None = None
    calm: int = 0
    entries: int = 0

    def average(self) -> float | None:
        return sum(self.window) / len(self.window) if self.window else None

    def observe(self, latency: float) -> ClientMode:
        average = self.average()
        if self.mode is ClientMode.normal:
            if self.enabled and len(self.window) >= self.window_size and latency >= self.threshold * average:
                self.mode = ClientMode.anti_thrash
                self.pre_entry_avg = average
                self.calm = 0
                self.entries += 1
        self.window.append(latency)
        while len(self.window) > self.window_size:
            self.window.popleft()
        if self.mode is ClientMode.anti_thrash:
            if self.average() < self.threshold * self.pre_entry_avg:
                self.calm += 1
            else:
                self.calm = 0
            if self.calm >= self.window_size:
                self.mode = ClientMode.normal
                self.pre_entry_avg = None
        return self.mode


@dataclass(eq = False)
class TcpServer:
    server_id: str
    vm_id: int
    connections: dict[int, list[FunctionInstance]] = field(default_factory = dict)

    def live(self, deployment: int, exclude: frozenset[str] = frozenset()) -> list[FunctionInstance]:
        return [instance for instance in self.connections.get(deployment, ())
                if instance.live and instance.instance_id not in exclude]

    def connect(self, instance: FunctionInstance) -> bool:
        if not instance.live:
            return False
        pool = self.connections.setdefault(instance.deployment, [])
        if instance in pool:
            return False
        pool.append(instance)
        instance.tcp_peers.add(self.server_id)
        return True

    def drop(self, instance: FunctionInstance) -> None:
        pool = self.connections.get(instance.deployment)
        if pool and instance in pool:
            pool.remove(instance)

    def any_live(self) -> list[FunctionInstance]:
        return [instance for pool in self.connections.values() for instance in pool if instance.live]


@dataclass(eq = False)
class VirtualMachine:
    vm_id: int
    servers: list[TcpServer] = field(default_factory = list)


@dataclass(frozen = True)
class RequestRecord:
    """One client operation from first issuance to final outcome, across resubmissions."""
    request_id: str
    client_id: int
    op: OpKind
    path: str
    dst: str | None
    via: Via
    attempts: int
    http_attempts: int
    stragglers: int
    invoked_at: int
    completed_at: int | None
    status: str
    code: str | None = None
    inode: int | None = None
    version: int | None = None
    cache_hit: bool = False
    served_by: str | None = None

    @property
    def latency_us(self) -> int | None:
        return None if self.completed_at is None else self.completed_at - self.invoked_at


@dataclass(frozen = True)
class Channel:
    via: Via
    instance: FunctionInstance | None = None
    shared: bool = False


class ClientFleet:
    """Client VMs and their TCP servers; keeps connection tables in step with instance terminations."""

    def __init__(self, kernel: SimKernel, platform: Platform, policy: PolicyConfig, n_vms: int, clients_per_vm: int):
        self.kernel = kernel
        self.platform = platform
        self.policy = policy
        self.vms: list[VirtualMachine] = []
        self.clients: list[ClientEndpoint] = []
        self.records: list[RequestRecord] = []
        self.dropped_connections = 0
        per_server = policy.max_clients_per_tcp_server or clients_per_vm
        servers_per_vm = math.ceil(clients_per_vm / per_server)
        client_ids = itertools.count()
        for vm_id in range(n_vms):
            vm = VirtualMachine(vm_id = vm_id, servers = [TcpServer(server_id = f"vm{vm_id}-s{s}", vm_id = vm_id)
                                                          for s in range(servers_per_vm)])
            self.vms.append(vm)
            for slot in range(clients_per_vm):
                self.clients.append(ClientEndpoint(next(client_ids), vm, vm.servers[slot // per_server], self))
        platform.on_leave.append(self.drop_instance)

    def drop_instance(self, instance: FunctionInstance) -> None:
        for vm in self.vms:
            for server in vm.servers:
                if server.server_id in instance.tcp_peers:
                    server.drop(instance)
                    self.dropped_connections += 1

    def find_shared_connection(self, vm: VirtualMachine, deployment: int, own: TcpServer,
                               exclude: frozenset[str] = frozenset()) -> tuple[FunctionInstance, TcpServer] | None:
        """
        The find_shared_connection function looks for a live connection to ``deployment`` held by
        another TCP server on the same VM.

        :param vm: VirtualMachine: Caller's VM
        :param deployment: int: Target deployment
        :param own: TcpServer: Caller's server, skipped
        :param exclude: frozenset[str]: Instances not to use
        :return: (instance, server) or None
        """
        for server in vm.servers:
            if server is own:
                continue
            live = server.live(deployment, exclude)
            if live:
                return live[0], server
        return None


class ClientEndpoint:
    """
    One client process: chooses TCP or HTTP per request, retries transport failures with
    backoff, resubmits stragglers and switches to anti-thrashing mode on latency spikes.
    """

    def __init__(self, client_id: int, vm: VirtualMachine, server: TcpServer, fleet: ClientFleet):
        self.client_id = client_id
        self.vm = vm
        self.server = server
        self.fleet = fleet
        self.kernel = fleet.kernel
        self.platform = fleet.platform
        self.policy = fleet.policy
        self.rng = self.kernel.rng("client", client_id)
        self.tracker = LatencyTracker(window_size = self.policy.latency_window,
                                      threshold = self.policy.anti_thrash_threshold,
                                      enabled = self.policy.anti_thrash_enabled)
        self._seq = itertools.count(1)
        self.issued = 0
        self.completed = 0
        self.failed = 0
        self.gave_up = 0

    @property
    def mode(self) -> ClientMode:
        return self.tracker.mode

    def update_mode(self, latency_us: float) -> ClientMode:
        return self.tracker.observe(latency_us)

    def choose_channel(self, deployment: int, exclude: frozenset[str] = frozenset(),
                       force_http: bool = False) -> Channel:
        if force_http:
            return Channel(Via.http)
        own = self.server.live(deployment, exclude)
        channel = None
        if own:
            channel = Channel(Via.tcp, own[int(self.rng.integers(len(own)))])
        else:
            shared = self.fleet.find_shared_connection(self.vm, deployment, self.server, exclude)
            if shared is not None:
                channel = Channel(Via.tcp, shared[0], shared = True)
        if self.mode is ClientMode.anti_thrash:
            if channel is not None:
                return channel
            anywhere = [instance for server in self.vm.servers for instance in server.any_live()
                        if instance.instance_id not in exclude]
            if anywhere:
                return Channel(Via.tcp, anywhere[0], shared = True)
            return Channel(Via.http)
        if channel is not None and self.rng.random() < self.policy.replacement_probability:
            return Channel(Via.http)
        return channel or Channel(Via.http)

    def _tcp_call(self, instance: FunctionInstance, request: RpcRequest) -> Generator:
        yield self.kernel.timer(self.kernel.sample_latency(LatencyKind.tcp, self.rng), EventKind.rpc_arrival)
        if not instance.live:
            return None
        self.platform.tcp_requests += 1
        response = yield self.platform.serve(instance, instance.handler.handle(request))
        if response is None:
            return None
        yield self.kernel.timer(self.kernel.sample_latency(LatencyKind.tcp, self.rng), EventKind.rpc_complete)
        return response, instance

    def _http_call(self, deployment: int, request: RpcRequest) -> Generator:
        instance = yield from self.platform.invoke_http(deployment, self.rng)
        try:
            response = yield self.platform.serve(instance, instance.handler.handle(request))
        finally:
            self.platform.release_slot(instance)
        if response is None:
            return None
        return response, instance

    def _await(self, call, timeout_us: int, via: Via, started: int) -> Generator:
        """Waits for a call; returns (response, instance), "straggler" or None on timeout."""
        deadline = started + timeout_us
        average = self.tracker.average()
        check_at = None
        if self.policy.straggler_enabled and via is Via.tcp and average:
            check_at = started + int(math.ceil(self.policy.straggler_k * average))
            if check_at >= deadline:
                check_at = None
        if check_at is not None:
            yield call | self.kernel.sleep(check_at - self.kernel.now)
            if not call.triggered:
                decision = check_straggler(self.kernel.now - started, average, self.policy.straggler_k)
                if decision is StragglerDecision.cancel_and_resubmit:
                    return "straggler"
        if not call.triggered:
            yield call | self.kernel.sleep(max(0, deadline - self.kernel.now))
        if call.triggered and call.ok and call.value is not None:
            return call.value
        if self.kernel.now < deadline:
            yield self.kernel.sleep(deadline - self.kernel.now)
        return None

    def submit(self, op: OpKind, path: str, dst: str | None = None, perms: int | None = None) -> Generator:
        """
        The submit function runs one operation to completion: choose a channel, send, wait, and on
        transport failure back off and resubmit under the same request id.

        :param op: OpKind: Operation kind
        :param path: str: Normalized target path
        :param dst: str | None: Destination for mv
        :param perms: int | None: Permission bits for chmod
        :return: RpcResponse of the successful attempt
        """
        request_id = f"c{self.client_id}-{next(self._seq)}"
        deployment = routing_deployment(op, path, self.platform.n_deployments)
        invoked = self.kernel.now
        self.issued += 1
        exclude: set[str] = set()
        force_http = False
        http_attempts = 0
        stragglers = 0
        attempt = 0
        via = Via.tcp
        while attempt < self.policy.max_attempts:
            attempt += 1
            channel = self.choose_channel(deployment, frozenset(exclude), force_http)
            via = channel.via
            request = RpcRequest(request_id = request_id, client_id = self.client_id, op = op, path = path, dst = dst,
                                 perms = perms, via = via, attempt = attempt, issued_at = invoked)
            started = self.kernel.now
            if via is Via.tcp:
                call = self.kernel.process(self._tcp_call(channel.instance, request))
                timeout = ms_to_us(self.policy.tcp_timeout_ms)
            else:
                http_attempts += 1
                call = self.kernel.process(self._http_call(deployment, request))
                timeout = ms_to_us(self.policy.http_timeout_ms)
            outcome = yield from self._await(call, timeout, via, started)
            if outcome == "straggler":
                stragglers += 1
                exclude.add(channel.instance.instance_id)
                continue
            if outcome is None or outcome[0].status is ResponseStatus.retry:
                if outcome is None:
                    if channel.instance is not None:
                        exclude.add(channel.instance.instance_id)
                    force_http = via is Via.http
                yield self.kernel.sleep(next_backoff(attempt, self.rng, ms_to_us(self.policy.backoff_base_ms),
                                                     ms_to_us(self.policy.backoff_cap_ms)))
                continue
            response, instance = outcome
            if via is Via.http or channel.shared:
                self.server.connect(instance)
            completed = self.kernel.now
            self.update_mode(completed - invoked)
            self._record(request, response, via, attempt, http_attempts, stragglers, invoked, completed)
            if response.status is ResponseStatus.error:
                self.failed += 1
                raise OperationFailed(request_id, response.code, path)
            self.completed += 1
            return response
        self.gave_up += 1
        self.fleet.records.append(RequestRecord(
            request_id = request_id, client_id = self.client_id, op = op, path = path, dst = dst, via = via,
            attempts = attempt, http_attempts = http_attempts, stragglers = stragglers, invoked_at = invoked,
            completed_at = None, status = "gave-up"))
        logger.info("t=%d client %d gave up on %s %s", self.kernel.now, self.client_id, op.value, path)
        raise GiveUp(request_id, attempt)

    def _record(self, request: RpcRequest, response: RpcResponse, via: Via, attempts: int, http_attempts: int,
                stragglers: int, invoked: int, completed: int) -> None:
        self.fleet.records.append(RequestRecord(
            request_id = request.request_id, client_id = self.client_id, op = request.op, path = request.path,
            dst = request.dst, via = via, attempts = attempts, http_attempts = http_attempts, stragglers = stragglers,
            invoked_at = invoked, completed_at = completed, status = response.status.value, code = response.code,
            inode = response.inode, version = response.version, cache_hit = response.cache_hit,
            served_by = response.served_by))
