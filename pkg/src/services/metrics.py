import logging
import math
from collections.abc import Generator, Iterable, Mapping
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from src.schemas.scenario import CostConfig, READ_KINDS, US_PER_S, ms_to_us
from src.services.client import RequestRecord
from src.services.kernel import SimKernel
from src.services.platform import Platform

logger = logging.getLogger(__name__)

QUANTILES = {"p50": 0.50, "p90": 0.90, "p99": 0.99, "p99.9": 0.999}
THROUGHPUT_COLUMNS = ["t", "ops", "instances", "vcpu", "cost_ppu", "cost_simpl"]

Intervals = Iterable[tuple[int, int]]


def _slice_ranges(intervals: Intervals, granularity_us: int) -> list[tuple[int, int]]:
    """Billing slices [first, last) touched by the intervals, merged so overlaps bill once."""
    ranges = sorted((start // granularity_us, -(-end // granularity_us))
                    for start, end in intervals if end > start)
    merged: list[tuple[int, int]] = []
    for first, last in ranges:
        if merged and first <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], last))
        else:
            merged.append((first, last))
    return merged


def billed_seconds(intervals: Intervals, granularity_ms: int = 1) -> float:
    """
    >>> billed_seconds([(0, 1_000_000)])
    1.0
    >>> billed_seconds([(0, 1), (0, 2), (1_500, 1_600)])
    0.002
    """
    granularity_us = ms_to_us(granularity_ms)
    slices = sum(last - first for first, last in _slice_ranges(intervals, granularity_us))
    return slices * granularity_us / US_PER_S


def request_fees(requests: int, cost: CostConfig) -> float:
    return requests / 1_000_000 * cost.per_million_requests


def cost_pay_per_use(busy: Mapping[str, Intervals], mem_gb: float, cost: CostConfig | None = None,
                     requests: int = 0) -> float:
    """
    The cost_pay_per_use function bills every instance only for the slices during which it served at
    least one request, plus the per-request fee.

    :param busy: Mapping[str, Intervals]: Busy (start, end) µs intervals per instance
    :param mem_gb: float: Memory allocation of one instance
    :param cost: CostConfig: Prices and billing granularity
    :param requests: int: Billed invocations
    :return: Dollars
    """
    cost = cost or CostConfig()
    seconds = sum(billed_seconds(intervals, cost.billing_granularity_ms) for intervals in busy.values())
    return seconds * mem_gb * cost.gb_second_price + request_fees(requests, cost)


def cost_simplified(lifetimes: Mapping[str, tuple[int, int]], mem_gb: float, cost: CostConfig | None = None,
                    requests: int = 0) -> float:
    """Provisioned-time billing: the pay-per-use rate over each instance's whole lifetime."""
    cost = cost or CostConfig()
    seconds = sum(billed_seconds([lifetime], cost.billing_granularity_ms) for lifetime in lifetimes.values())
    return seconds * mem_gb * cost.gb_second_price + request_fees(requests, cost)


def cost_serverful(duration_us: int, cluster_vcpus: float, cost: CostConfig | None = None) -> float:
    """
    Fixed cluster of VMs sized to ``cluster_vcpus`` kept up for the whole run.

    >>> round(cost_serverful(3_600_000_000, 32.0), 2)
    15.36
    """
    cost = cost or CostConfig()
    vms = math.ceil(cluster_vcpus / cost.serverful_vm_vcpus)
    return vms * cost.serverful_vm_hour_price * duration_us / (3_600 * US_PER_S)


def seconds_series(intervals_by_owner: Mapping[str, Intervals], n_seconds: int, granularity_ms: int = 1) -> np.ndarray:
    """Billed seconds falling into each whole second of the run."""
    granularity_us = ms_to_us(granularity_ms)
    per_second_slices = US_PER_S // granularity_us
    billed = np.zeros(n_seconds, dtype = np.int64)
    for intervals in intervals_by_owner.values():
        for first, last in _slice_ranges(intervals, granularity_us):
            second = first // per_second_slices
            while first < last and second < n_seconds:
                boundary = min(last, (second + 1) * per_second_slices)
                billed[second] += boundary - first
                first = boundary
                second += 1
    return billed * granularity_us / US_PER_S


def perf_per_cost(ops: pd.Series, cost: pd.Series) -> tuple[list[float | None], float | None]:
    """
    The perf_per_cost function divides throughput by cost, per second and over the whole run.

    :param ops: pd.Series: Completed operations in each second
    :param cost: pd.Series: Dollars billed in each second
    :return: (instantaneous ops/s/$ with None where a second cost nothing,
        aggregate average throughput / total cost or None when the run cost nothing)
    """
    instantaneous = [float(o / c) if c > 0 else None for o, c in zip(ops.tolist(), cost.tolist())]
    total = float(cost.sum())
    aggregate = float(ops.mean()) / total if total > 0 and len(ops) else None
    return instantaneous, aggregate


@dataclass(frozen = True)
class LatencyCdf:
    op: str | None
    count: int
    quantiles: dict[str, float]
    table: pd.DataFrame


def latency_cdf(samples: pd.DataFrame, op: str | None = None) -> LatencyCdf:
    """
    The latency_cdf function builds the empirical CDF of completed-request latencies.

    :param samples: pd.DataFrame: Frame with ``op`` and ``latency_ms`` columns
    :param op: str | None: Keep only this operation kind; None keeps every kind
    :return: LatencyCdf with p50/p90/p99/p99.9 and a (latency_ms, cdf) table
    """
    if op is not None:
        samples = samples[samples["op"] == op]
    values = np.sort(samples["latency_ms"].to_numpy(dtype = float))
    if values.size == 0:
        raise ValueError(f"no latency samples for {op or 'any operation'}")
    quantiles = {name: float(np.quantile(values, q)) for name, q in QUANTILES.items()}
    table = pd.DataFrame({"latency_ms": values, "cdf": np.arange(1, values.size + 1) / values.size})
    return LatencyCdf(op = op, count = int(values.size), quantiles = quantiles, table = table)


def requests_frame(records: Iterable[RequestRecord]) -> pd.DataFrame:
    rows = []
    for record in records:
        row = asdict(record)
        row["op"] = record.op.value
        row["via"] = record.via.value
        row["latency_ms"] = record.latency_us / 1_000 if record.latency_us is not None else None
        rows.append(row)
    columns = list(RequestRecord.__dataclass_fields__) + ["latency_ms"]
    frame = pd.DataFrame(rows, columns = columns)
    return frame.sort_values(["invoked_at", "request_id"], kind = "stable").reset_index(drop = True)


class MetricsRecorder:
    """Samples the platform once per virtual second; everything else is derived after the run."""

    def __init__(self, kernel: SimKernel, platform: Platform):
        self.kernel = kernel
        self.platform = platform
        self.rows: list[dict] = []
        self.peak_instances = 0
        self.peak_vcpu = 0.0

    def start(self) -> None:
        self.kernel.process(self._tick())

    def sample(self) -> dict:
        row = self.platform.trace_row()
        row["http_invocations"] = self.platform.http_invocations
        self.peak_instances = max(self.peak_instances, row["instances"])
        self.peak_vcpu = max(self.peak_vcpu, row["vcpu"])
        self.rows.append(row)
        return row

    def _tick(self) -> Generator:
        while True:
            self.sample()
            yield self.kernel.sleep(US_PER_S)

    def platform_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)


def throughput_frame(requests: pd.DataFrame, platform_rows: pd.DataFrame, busy: Mapping[str, Intervals],
                     lifetimes: Mapping[str, tuple[int, int]], n_seconds: int, mem_gb: float,
                     cost: CostConfig) -> pd.DataFrame:
    """
    Per-second series over the run: completed operations, live instances, vCPU in use, and cumulative
    pay-per-use and simplified cost. Request fees are billed in the second of each HTTP invocation.
    """
    ok = requests[requests["status"] == "ok"]
    completed = (ok["completed_at"].astype("int64") // US_PER_S).clip(upper = n_seconds - 1)
    ops = np.bincount(completed.to_numpy(), minlength = n_seconds)[:n_seconds]
    frame = pd.DataFrame({"t": np.arange(n_seconds)})
    frame["ops"] = ops
    sampled = platform_rows.drop_duplicates("t", keep = "last").set_index("t") if len(platform_rows) else None
    if sampled is not None:
        aligned = sampled.reindex(frame["t"]).ffill().fillna(0)
        frame["instances"] = aligned["instances"].astype("int64").to_numpy()
        frame["vcpu"] = aligned["vcpu"].astype(float).to_numpy()
        invocations = aligned["http_invocations"].astype("int64").to_numpy()
        fees = np.diff(invocations, prepend = 0) / 1_000_000 * cost.per_million_requests
    else:
        frame["instances"] = 0
        frame["vcpu"] = 0.0
        fees = np.zeros(n_seconds)
    rate = mem_gb * cost.gb_second_price
    frame["cost_ppu_s"] = seconds_series(busy, n_seconds, cost.billing_granularity_ms) * rate + fees
    frame["cost_simpl_s"] = seconds_series({k: [v] for k, v in lifetimes.items()}, n_seconds,
                                           cost.billing_granularity_ms) * rate + fees
    frame["cost_ppu"] = frame["cost_ppu_s"].cumsum()
    frame["cost_simpl"] = frame["cost_simpl_s"].cumsum()
    return frame


def _quantiles_or_none(requests: pd.DataFrame, op: str | None = None) -> dict[str, float] | None:
    try:
        return latency_cdf(requests.dropna(subset = ["latency_ms"]), op).quantiles
    except ValueError:
        return None


def summarize(requests: pd.DataFrame, throughput: pd.DataFrame, counters: dict, costs: dict[str, float],
              warmup_us: int = 0) -> dict:
    """
    Run summary: operation accounting, throughput, latency quantiles, channel and cache statistics,
    the three costs and their aggregate performance-per-cost.
    """
    ok = requests[requests["status"] == "ok"]
    steady = ok[ok["invoked_at"] >= warmup_us]
    read_ops = [kind.value for kind in READ_KINDS]
    reads = steady[steady["op"].isin(read_ops)]
    ops_per_second = float(throughput["ops"].mean()) if len(throughput) else 0.0
    summary = {
        "issued": int(counters.get("issued", len(requests))),
        "completed": int(len(ok)),
        "failed": int((requests["status"] == "error").sum()),
        "gave_up": int((requests["status"] == "gave-up").sum()),
        "in_flight_at_end": int(counters.get("in_flight", 0)),
        "avg_throughput": ops_per_second,
        "peak_throughput": int(throughput["ops"].max()) if len(throughput) else 0,
        "read_throughput": float(ok["op"].isin(read_ops).sum() / max(len(throughput), 1)),
        "http_fraction": float((steady["via"] == "http").mean()) if len(steady) else None,
        "cache_hit_rate": float(reads["cache_hit"].astype(bool).mean()) if len(reads) else None,
        "avg_read_latency_ms": float(reads["latency_ms"].mean()) if len(reads) else None,
        "latency": _quantiles_or_none(ok),
        "latency_by_op": {op: _quantiles_or_none(ok, op) for op in sorted(ok["op"].unique())},
        "cost": costs,
        "perf_per_cost": {name: (ops_per_second / value if value > 0 else None) for name, value in costs.items()},
    }
    summary.update({key: value for key, value in counters.items() if key not in ("issued", "in_flight")})
    return summary
