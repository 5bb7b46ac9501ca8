import unittest

from src.schemas.scenario import LatencyConfig, LatencyRange
from src.services.kernel import EventKind, LatencyKind, SimKernel, sample_latency


class TestSimKernel(unittest.TestCase):

    def setUp(self) -> None:
        self.kernel = SimKernel(seed = 7)

    def test_dispatch_order_is_time_then_insertion(self):
        fired = []
        self.kernel.schedule(30, EventKind.timeout, lambda h: fired.append(("c", h.fire_at)))
        self.kernel.schedule(10, EventKind.timeout, lambda h: fired.append(("a", h.fire_at)))
        self.kernel.schedule(10, EventKind.timeout, lambda h: fired.append(("b", h.fire_at)))
        dispatched = self.kernel.run_until(100)
        self.assertEqual(fired, [("a", 10), ("b", 10), ("c", 30)])
        self.assertEqual(dispatched, 3)
        self.assertEqual(self.kernel.now, 100)

    def test_cancelled_handle_never_fires(self):
        fired = []
        handle = self.kernel.schedule(5, EventKind.timeout, lambda h: fired.append(h))
        handle.cancel()
        self.kernel.run_until(10)
        self.assertEqual(fired, [])
        self.assertFalse(handle.dispatched)

    def test_run_until_stops_at_end(self):
        fired = []
        self.kernel.schedule(50, EventKind.interval_tick, lambda h: fired.append(h.fire_at))
        self.kernel.run_until(49)
        self.assertEqual(fired, [])
        self.kernel.run_until(50)
        self.assertEqual(fired, [50])

    def test_rejects_past(self):
        self.kernel.run_until(10)
        with self.assertRaises(ValueError):
            self.kernel.schedule(-1, EventKind.timeout)
        with self.assertRaises(ValueError):
            self.kernel.run_until(5)

    def test_event_log_records_dispatches(self):
        self.kernel.schedule(3, EventKind.rpc_arrival)
        self.kernel.run_until(3)
        self.assertEqual(self.kernel.event_log, ["3 1 rpc-arrival"])

    def test_timer_logs_before_the_process_resumes(self):
        seen = []

        def actor():
            yield self.kernel.timer(40, EventKind.cold_start_done)
            seen.append(list(self.kernel.event_log))

        self.kernel.process(actor())
        self.assertEqual(self.kernel.run_until(100), 1)
        self.assertEqual(seen, [["40 1 cold-start-done"]])

    def test_processes_sleep_in_virtual_time(self):
        seen = []

        def actor():
            yield self.kernel.sleep(250)
            seen.append(self.kernel.now)

        self.kernel.process(actor())
        self.kernel.run_until(1_000)
        self.assertEqual(seen, [250])


class TestRandomStreams(unittest.TestCase):

    def test_same_seed_same_stream(self):
        a = SimKernel(seed = 3).rng("client", 4).random(5)
        b = SimKernel(seed = 3).rng("client", 4).random(5)
        self.assertEqual(list(a), list(b))

    def test_streams_are_independent(self):
        kernel = SimKernel(seed = 3)
        self.assertNotEqual(list(kernel.rng("client", 1).random(3)), list(kernel.rng("client", 2).random(3)))
        self.assertNotEqual(list(kernel.rng("client", 1).random(3)), list(kernel.rng("workload", 1).random(3)))

    def test_sample_latency_bounds(self):
        kernel = SimKernel(seed = 1, latency = LatencyConfig(tcp = LatencyRange(min_us = 10, max_us = 20)))
        rng = kernel.rng("test")
        draws = [kernel.sample_latency(LatencyKind.tcp, rng) for _ in range(200)]
        self.assertTrue(all(10 <= d <= 20 for d in draws))
        self.assertEqual(sample_latency(LatencyRange(min_us = 5, max_us = 5), rng), 5)
