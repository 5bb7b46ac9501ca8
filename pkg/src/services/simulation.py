import logging
import math
from dataclasses import dataclass

import pandas as pd

from src.repository.namespace import NamespaceStore
from src.schemas.scenario import Scenario, US_PER_S, ms_to_us, seconds_to_us
from src.services.client import ClientFleet
from src.services.coherence import CoherentWriter, Coordinator
from src.services.kernel import SimKernel
from src.services.metrics import LatencyCdf, MetricsRecorder, cost_pay_per_use, cost_serverful, cost_simplified, \
    latency_cdf, requests_frame, summarize, throughput_frame
from src.services.namenode import NameNode
from src.services.platform import FunctionInstance, Platform
from src.services.trace import ProtocolTrace
from src.services.workload import WorkloadDriver, failure_injector, failure_schedule, populate

logger = logging.getLogger(__name__)


@dataclass
class SimulationResult:
    scenario: Scenario
    end_us: int
    requests: pd.DataFrame
    throughput: pd.DataFrame
    platform_trace: pd.DataFrame
    summary: dict
    trace: ProtocolTrace
    snapshot: list[dict]
    event_log: list[str]

    def latency_cdfs(self) -> dict[str, LatencyCdf]:
        """One CDF per operation kind that completed at least once."""
        done = self.requests[(self.requests["status"] == "ok")].dropna(subset = ["latency_ms"])
        return {op: latency_cdf(done, op) for op in sorted(done["op"].unique())}


class Simulation:
    """
    One seeded run of a scenario: builds the store, platform, coherence layer and client fleet on a
    fresh kernel, populates the namespace, drives the workload and collects metrics.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.kernel = SimKernel(scenario.seed, scenario.latency)
        self.trace = ProtocolTrace()
        n = scenario.platform.n_deployments
        self.store = NamespaceStore(self.kernel, n, scenario.store, self.trace)
        self.platform = Platform(self.kernel, scenario.platform, scenario.cache.capacity)
        self.coordinator = Coordinator(self.kernel, n, scenario.coherence, self.trace)
        self.writer = CoherentWriter(self.kernel, self.store, self.coordinator, self.platform, scenario.coherence)
        self.platform.handler_factory = self._handler
        self.platform.on_join.append(self.coordinator.join)
        self.platform.on_leave.append(self._instance_left)
        workload = scenario.workload
        self.fleet = ClientFleet(self.kernel, self.platform, scenario.policy, workload.n_vms, workload.clients_per_vm)
        self.recorder = MetricsRecorder(self.kernel, self.platform)
        self.view = None
        self.driver = None

    def _handler(self, instance: FunctionInstance) -> NameNode:
        return NameNode(instance, self.store, self.writer, self.platform, self.scenario.policy)

    def _instance_left(self, instance: FunctionInstance) -> None:
        self.coordinator.leave(instance)
        aborted = self.store.abort_owned_by(instance.instance_id)
        if aborted:
            logger.info("t=%d aborted %d transactions of %s", self.kernel.now, aborted, instance.instance_id)

    def _drain_limit(self) -> int:
        policy = self.scenario.policy
        per_attempt = ms_to_us(max(policy.tcp_timeout_ms, policy.http_timeout_ms) + policy.backoff_cap_ms)
        return policy.max_attempts * per_attempt + seconds_to_us(self.scenario.coherence.round_timeout_s)

    def run(self) -> SimulationResult:
        """
        The run function executes the scenario to the end of its workload, then keeps the clock going
        until every in-flight request has finished or the drain limit passes.

        :return: SimulationResult with request records, per-second series, summary, trace and snapshot
        """
        scenario = self.scenario
        workload = scenario.workload
        self.view = populate(self.store, workload.namespace)
        self.platform.prewarm()
        self.platform.start_reclaimer()
        self.recorder.start()
        self.driver = WorkloadDriver(self.kernel, self.fleet, workload, self.view)
        self.driver.start()
        times = failure_schedule(scenario.failure.period_s, workload.duration_s)
        if times:
            self.kernel.process(failure_injector(self.kernel, self.platform, times))
        end = seconds_to_us(workload.duration_s)
        logger.info("running scenario %s seed=%d for %.1f s", scenario.name, scenario.seed, workload.duration_s)
        self.kernel.run_until(end)
        limit = end + self._drain_limit()
        while self.driver.in_flight and self.kernel.now < limit:
            self.kernel.run_until(min(limit, self.kernel.now + US_PER_S))
        if self.driver.in_flight:
            logger.warning("t=%d %d requests still in flight at the drain limit", self.kernel.now,
                           self.driver.in_flight)
        return self._collect()

    def _collect(self) -> SimulationResult:
        scenario = self.scenario
        platform = self.platform
        final = self.kernel.now
        n_seconds = max(1, math.ceil(final / US_PER_S))
        busy = {}
        lifetimes = {}
        for instance_id, instance in platform.instances.items():
            intervals = list(instance.busy_intervals)
            if instance.busy_since is not None:
                intervals.append((instance.busy_since, final))
            busy[instance_id] = intervals
            lifetimes[instance_id] = instance.lifetime(final)
        mem_gb = scenario.platform.mem_gb
        cluster_vcpus = scenario.cost.serverful_cluster_vcpus or scenario.platform.vcpu_budget
        costs = {
            "pay_per_use": cost_pay_per_use(busy, mem_gb, scenario.cost, platform.http_invocations),
            "simplified": cost_simplified(lifetimes, mem_gb, scenario.cost, platform.http_invocations),
            "serverful": cost_serverful(final, cluster_vcpus, scenario.cost),
        }
        requests = requests_frame(self.fleet.records)
        platform_trace = self.recorder.platform_frame()
        throughput = throughput_frame(requests, platform_trace, busy, lifetimes, n_seconds, mem_gb, scenario.cost)
        clients = self.fleet.clients
        counters = {
            "scenario": scenario.name,
            "seed": scenario.seed,
            "duration_s": scenario.workload.duration_s,
            "end_us": final,
            "issued": sum(client.issued for client in clients),
            "in_flight": self.driver.in_flight,
            "cold_starts": platform.cold_starts,
            "terminations": platform.terminations,
            "evictions": platform.evictions,
            "http_invocations": platform.http_invocations,
            "tcp_requests": platform.tcp_requests,
            "peak_instances": self.recorder.peak_instances,
            "peak_vcpu": self.recorder.peak_vcpu,
            "inv_messages": self.coordinator.inv_messages,
            "inv_deliveries": self.coordinator.inv_deliveries,
            "acks": self.coordinator.acks,
            "rounds_completed": self.coordinator.rounds_completed,
            "subtree_ops": self.writer.subtree_ops,
            "offloaded_batches": self.writer.offloaded_batches,
            "commits": self.store.commits,
            "committed_writes": self.store.committed_writes,
            "anti_thrash_entries": sum(client.tracker.entries for client in clients),
            "stragglers": int(requests["stragglers"].sum()) if len(requests) else 0,
            "dropped_connections": self.fleet.dropped_connections,
            "serverful_cluster_vcpus": cluster_vcpus,
        }
        summary = summarize(requests, throughput, counters, costs, seconds_to_us(scenario.workload.warmup_s))
        logger.info("scenario %s finished at t=%d: %d completed, %d failed, %d gave up", scenario.name, final,
                    summary["completed"], summary["failed"], summary["gave_up"])
        return SimulationResult(
            scenario = scenario,
            end_us = final,
            requests = requests,
            throughput = throughput,
            platform_trace = platform_trace,
            summary = summary,
            trace = self.trace,
            snapshot = [record.model_dump(mode = "json") for record in self.store.snapshot()],
            event_log = list(self.kernel.event_log),
        )


def run_scenario(scenario: Scenario) -> SimulationResult:
    return Simulation(scenario).run()
