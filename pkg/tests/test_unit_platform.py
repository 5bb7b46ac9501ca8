import unittest

import pytest

from src.schemas.scenario import LatencyConfig, LatencyRange, PlatformConfig
from src.services.kernel import SimKernel
from src.services.platform import InstanceState, Platform, predict_instances

HTTP_US = 10_000
COLD_US = 500_000


def fixed(us: int) -> LatencyRange:
    return LatencyRange(min_us = us, max_us = us)


class PlatformTestCase(unittest.TestCase):
    settings = PlatformConfig(n_deployments = 2, concurrency_level = 2, vcpu_budget = 25.0, per_instance_vcpu = 6.25,
                              idle_timeout_s = 1.0)

    def setUp(self) -> None:
        latency = LatencyConfig(http = fixed(HTTP_US), cold_start = fixed(COLD_US), service = fixed(100))
        self.kernel = SimKernel(seed = 1, latency = latency)
        self.platform = Platform(self.kernel, self.settings)
        self.joined = []
        self.left = []
        self.platform.on_join.append(lambda instance: self.joined.append(instance.instance_id))
        self.platform.on_leave.append(lambda instance: self.left.append(instance.instance_id))

    def invoke(self, deployment: int, results: list):
        def body():
            instance = yield from self.platform.invoke_http(deployment)
            results.append((self.kernel.now, instance))
        return self.kernel.process(body())


class TestInvocation(PlatformTestCase):

    def test_cold_start_then_warm(self):
        results = []
        self.invoke(0, results)
        self.kernel.run_until(1_000_000)
        (at, instance), = results
        self.assertEqual(at, HTTP_US + COLD_US)
        self.assertEqual(instance.instance_id, "nn-0-0")
        self.assertIs(instance.state, InstanceState.warm_idle)
        self.assertEqual(self.platform.cold_starts, 1)
        self.assertEqual(self.joined, ["nn-0-0"])

        self.invoke(0, results)
        self.kernel.run_until(2_000_000)
        self.assertEqual(results[1][0], 1_000_000 + HTTP_US)
        self.assertIs(results[1][1], instance)
        self.assertEqual(instance.concurrency_used, 2)
        self.assertEqual(self.platform.http_invocations, 2)

    def test_full_instance_scales_out(self):
        results = []
        for _ in range(3):
            self.invoke(1, results)
        self.kernel.run_until(1_000_000)
        ids = sorted(instance.instance_id for _, instance in results)
        self.assertEqual(ids, ["nn-1-0", "nn-1-1", "nn-1-2"])
        self.assertEqual(self.platform.vcpu_in_use, 18.75)

    def test_budget_exhaustion_queues_fifo(self):
        platform = Platform(self.kernel, PlatformConfig(n_deployments = 1, concurrency_level = 1, vcpu_budget = 6.25,
                                                        per_instance_vcpu = 6.25))
        order = []

        def body(tag):
            instance = yield from platform.invoke_http(0)
            order.append((tag, self.kernel.now))
            yield self.kernel.sleep(1_000)
            platform.release_slot(instance)

        self.kernel.process(body("first"))
        self.kernel.process(body("second"))
        self.kernel.run_until(1_000_000)
        self.assertEqual(order, [("first", HTTP_US + COLD_US), ("second", HTTP_US + COLD_US + 1_000)])
        self.assertEqual(platform.queued(), 0)

    def test_instance_cap(self):
        platform = Platform(self.kernel, PlatformConfig(n_deployments = 1, concurrency_level = 1,
                                                        max_instances_per_deployment = 1))
        results = []

        def body():
            instance = yield from platform.invoke_http(0)
            results.append(instance)

        self.kernel.process(body())
        self.kernel.process(body())
        self.kernel.run_until(1_000_000)
        self.assertEqual(len(results), 1)
        self.assertEqual(platform.queued(), 1)
        self.assertEqual(len(platform.live_instances()), 1)

    def test_rejects_unknown_deployment(self):
        with self.assertRaises(ValueError):
            next(self.platform.invoke_http(5))


class TestLifecycle(PlatformTestCase):

    def test_prewarm(self):
        started = self.platform.prewarm(1)
        self.assertEqual([instance.instance_id for instance in started], ["nn-0-0", "nn-1-0"])
        self.assertTrue(all(instance.warm for instance in started))
        self.assertEqual(self.platform.cold_starts, 0)
        self.assertEqual(self.joined, ["nn-0-0", "nn-1-0"])

    def test_terminate_interrupts_work(self):
        instance, = self.platform.prewarm(1)[:1]
        finished = []

        def work():
            yield self.kernel.sleep(1_000)
            finished.append(True)
            return "done"

        process = self.platform.serve(instance, work())
        self.kernel.run_until(100)
        self.assertIs(instance.state, InstanceState.busy)
        self.platform.terminate_instance(instance.instance_id)
        self.kernel.run_until(5_000)
        self.assertEqual(finished, [])
        self.assertIsNone(process.value)
        self.assertIs(instance.state, InstanceState.terminated)
        self.assertEqual(self.left, [instance.instance_id])
        self.assertEqual(instance.busy_intervals, [(0, 100)])
        self.assertEqual(self.platform.vcpu_in_use, 6.25)
        with self.assertRaises(KeyError):
            self.platform.terminate_instance(instance.instance_id)

    def test_serve_records_busy_interval(self):
        instance = self.platform.prewarm(1)[0]

        def work():
            yield self.kernel.sleep(300)
            return 42

        process = self.platform.serve(instance, work())
        self.kernel.run_until(1_000)
        self.assertEqual(process.value, 42)
        self.assertEqual(instance.busy_intervals, [(0, 300)])
        self.assertEqual(instance.lifetime(1_000), (0, 1_000))

    def test_reclaim_idle(self):
        self.platform.prewarm(1)
        self.assertEqual(self.platform.reclaim_idle(now = 500_000), [])
        victims = self.platform.reclaim_idle(now = 1_500_000)
        self.assertEqual(len(victims), 2)
        self.assertEqual(self.platform.live_instances(), [])
        self.assertEqual(self.platform.terminations, 2)

    def test_evict_to_admit(self):
        platform = Platform(self.kernel, PlatformConfig(n_deployments = 2, vcpu_budget = 6.25, per_instance_vcpu = 6.25,
                                                        evict_to_admit = True))
        platform.prewarm(1)
        self.assertEqual([i.deployment for i in platform.live_instances()], [0])
        results = []

        def body():
            instance = yield from platform.invoke_http(1)
            results.append(instance)

        self.kernel.process(body())
        self.kernel.run_until(1_000_000)
        self.assertEqual(platform.evictions, 1)
        self.assertEqual([i.deployment for i in platform.live_instances()], [1])
        self.assertEqual(results[0].deployment, 1)

    def test_trace_row(self):
        self.platform.prewarm(1)
        row = self.platform.trace_row()
        self.assertEqual(row, {"t": 0, "d0": 1, "d1": 1, "instances": 2, "vcpu": 12.5, "queued": 0})


class TestResultCache(PlatformTestCase):

    def test_expiry(self):
        instance = self.platform.prewarm(1)[0]
        instance.remember_result("c1-1", "response", expires_at = 100)
        self.assertEqual(instance.cached_result("c1-1", 50), "response")
        self.assertIsNone(instance.cached_result("c1-1", 100))
        self.assertIsNone(instance.cached_result("c1-1", 50))


@pytest.mark.parametrize("rate, p, service_s, level, expected", [
    (25_000, 0.01, 0.02, 4, 2),
    (50_000, 0.01, 0.02, 4, 3),
    (0, 0.01, 0.02, 4, 0),
    (1_000, 0.5, 0.01, 2, 3),
])
def test_predict_instances(rate, p, service_s, level, expected):
    assert predict_instances(rate, p, service_s, level) == expected
