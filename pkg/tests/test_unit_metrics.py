import unittest

import pandas as pd
import pytest

from src.schemas.rpc import Via
from src.schemas.scenario import CostConfig, OpKind
from src.services.client import RequestRecord
from src.services.metrics import billed_seconds, cost_pay_per_use, cost_serverful, cost_simplified, latency_cdf, \
    perf_per_cost, requests_frame, seconds_series, summarize, throughput_frame

UNIT_PRICES = CostConfig(gb_second_price = 1.0, per_million_requests = 1.0)


def record(request_id: str, op: OpKind, via: Via, invoked_at: int, completed_at: int | None, status: str = "ok",
           cache_hit: bool = False) -> RequestRecord:
    return RequestRecord(request_id = request_id, client_id = 0, op = op, path = "/a", dst = None, via = via,
                         attempts = 1, http_attempts = int(via is Via.http), stragglers = 0, invoked_at = invoked_at,
                         completed_at = completed_at, status = status, cache_hit = cache_hit)


def sample_requests() -> pd.DataFrame:
    return requests_frame([
        record("c0-4", OpKind.mv, Via.http, 1_600_000, None, status = "gave-up"),
        record("c0-1", OpKind.read, Via.tcp, 0, 2_000, cache_hit = True),
        record("c0-2", OpKind.read, Via.http, 1_000_000, 1_010_000),
        record("c0-3", OpKind.create, Via.tcp, 1_500_000, 1_504_000),
    ])


class TestBilling(unittest.TestCase):

    def test_overlapping_intervals_bill_once(self):
        self.assertEqual(billed_seconds([(0, 500_000), (250_000, 750_000)]), 0.75)

    def test_granularity_rounds_up(self):
        self.assertAlmostEqual(billed_seconds([(0, 1_000)], granularity_ms = 100), 0.1)
        self.assertEqual(billed_seconds([(5, 5)]), 0.0)

    def test_pay_per_use(self):
        busy = {"a": [(0, 1_000_000)], "b": [(0, 500_000), (250_000, 750_000)]}
        self.assertAlmostEqual(cost_pay_per_use(busy, 2.0, UNIT_PRICES, requests = 2_000_000), 5.5)

    def test_simplified_bills_lifetimes(self):
        self.assertAlmostEqual(cost_simplified({"a": (0, 2_000_000)}, 1.0, UNIT_PRICES), 2.0)

    def test_serverful_rounds_vms_up(self):
        self.assertAlmostEqual(cost_serverful(1_800_000_000, 17.0), 7.68)

    def test_seconds_series_splits_at_boundaries(self):
        series = seconds_series({"a": [(500_000, 1_500_000)], "b": [(0, 250_000)]}, 3)
        self.assertEqual(series.tolist(), [0.75, 0.5, 0.0])


class TestDerivedMetrics(unittest.TestCase):

    def test_requests_frame_is_ordered(self):
        frame = sample_requests()
        self.assertEqual(frame["request_id"].tolist(), ["c0-1", "c0-2", "c0-3", "c0-4"])
        self.assertEqual(frame["latency_ms"].tolist()[:3], [2.0, 10.0, 4.0])
        self.assertEqual(frame["op"].tolist()[0], "read")

    def test_latency_cdf(self):
        samples = pd.DataFrame({"op": ["read", "read", "ls", "read"], "latency_ms": [4.0, 1.0, 3.0, 2.0]})
        cdf = latency_cdf(samples)
        self.assertEqual(cdf.count, 4)
        self.assertEqual(cdf.quantiles["p50"], 2.5)
        self.assertEqual(cdf.table["cdf"].tolist(), [0.25, 0.5, 0.75, 1.0])
        self.assertEqual(latency_cdf(samples, "read").table["latency_ms"].tolist(), [1.0, 2.0, 4.0])
        with self.assertRaises(ValueError):
            latency_cdf(samples, "mv")

    def test_perf_per_cost(self):
        instantaneous, aggregate = perf_per_cost(pd.Series([10, 20]), pd.Series([0.5, 0.0]))
        self.assertEqual(instantaneous, [20.0, None])
        self.assertEqual(aggregate, 30.0)
        self.assertEqual(perf_per_cost(pd.Series([1]), pd.Series([0.0]))[1], None)

    def test_throughput_frame(self):
        rows = pd.DataFrame([{"t": 0, "instances": 1, "vcpu": 6.25, "http_invocations": 0},
                             {"t": 1, "instances": 2, "vcpu": 12.5, "http_invocations": 2}])
        frame = throughput_frame(sample_requests(), rows, {"i0": [(0, 1_500_000)]}, {"i0": (0, 2_000_000)}, 2,
                                 1.0, UNIT_PRICES)
        self.assertEqual(frame["ops"].tolist(), [1, 2])
        self.assertEqual(frame["instances"].tolist(), [1, 2])
        self.assertAlmostEqual(frame["cost_ppu_s"].iloc[0], 1.0)
        self.assertAlmostEqual(frame["cost_ppu_s"].iloc[1], 0.5 + 2e-6)
        self.assertAlmostEqual(frame["cost_simpl"].iloc[1], 2.0 + 2e-6)

    def test_summarize(self):
        requests = sample_requests()
        throughput = pd.DataFrame({"t": [0, 1], "ops": [1, 2]})
        summary = summarize(requests, throughput, {"issued": 4, "in_flight": 0, "cold_starts": 2},
                            {"pay_per_use": 0.5, "serverful": 0.0})
        self.assertEqual(summary["completed"], 3)
        self.assertEqual(summary["gave_up"], 1)
        self.assertEqual(summary["avg_throughput"], 1.5)
        self.assertEqual(summary["peak_throughput"], 2)
        self.assertAlmostEqual(summary["http_fraction"], 1 / 3)
        self.assertEqual(summary["cache_hit_rate"], 0.5)
        self.assertEqual(summary["avg_read_latency_ms"], 6.0)
        self.assertEqual(sorted(summary["latency_by_op"]), ["create", "read"])
        self.assertEqual(summary["perf_per_cost"], {"pay_per_use": 3.0, "serverful": None})
        self.assertEqual(summary["cold_starts"], 2)


@pytest.mark.parametrize("hours, vcpus, expected", [(1.0, 16.0, 7.68), (1.0, 32.0, 15.36), (0.5, 64.0, 15.36)])
def test_serverful_prices(hours, vcpus, expected):
    assert cost_serverful(int(hours * 3_600_000_000), vcpus) == pytest.approx(expected)
