from pathlib import Path

import pandas as pd
import pytest

from src.repository import artifacts
from src.repository.scenarios import apply_overrides, load_scenario
from src.services.experiments import run_experiment, sweep_experiments
from src.services.simulation import run_scenario
from src.services.trace import TraceKind

WRITE_HEAVY = {"create": 20, "mkdirs": 2, "delete": 3, "mv": 5, "chmod": 10, "read": 40, "stat": 12, "ls": 8}


@pytest.fixture()
def tiny(tiny_scenario_file: Path):
    return load_scenario(tiny_scenario_file)


def test_same_seed_same_run(tiny):
    first, second = run_scenario(tiny), run_scenario(tiny)
    pd.testing.assert_frame_equal(first.requests, second.requests)
    assert first.summary == second.summary
    assert first.trace.lines() == second.trace.lines()
    assert first.event_log and first.event_log == second.event_log
    assert {line.split()[2] for line in first.event_log} >= {"rpc-arrival", "instance-reclaim"}


def test_seed_changes_the_run(tiny):
    first = run_scenario(tiny)
    other = run_scenario(apply_overrides(tiny, ["seed=8"]))
    assert first.requests["invoked_at"].tolist() != other.requests["invoked_at"].tolist()


def test_run_completes_and_costs(tiny):
    result = run_scenario(tiny)
    summary = result.summary
    assert summary["completed"] > 0
    assert summary["in_flight_at_end"] == 0
    assert summary["issued"] >= summary["completed"] + summary["failed"] + summary["gave_up"]
    assert summary["cost"]["pay_per_use"] <= summary["cost"]["simplified"]
    assert summary["cost"]["serverful"] == pytest.approx(4 * 7.68 * result.end_us / 3_600_000_000)
    assert summary["commits"] >= 1
    assert list(result.throughput["t"]) == list(range(len(result.throughput)))


def test_written_run_verifies(tiny, tmp_path: Path):
    result, report, target = run_experiment(tiny, tmp_path / "run")
    assert report.passed, report.failed()
    assert target == tmp_path / "run"
    for name in (artifacts.THROUGHPUT, artifacts.SUMMARY, artifacts.REQUESTS, artifacts.PROTOCOL_TRACE,
                 artifacts.SNAPSHOT, artifacts.PLATFORM_TRACE, artifacts.SCENARIO, artifacts.VERIFY_REPORT):
        assert (target / name).is_file()
    assert (target / "latency_cdf_read.csv").is_file()
    assert artifacts.read_summary(target)["completed"] == result.summary["completed"]
    assert len(artifacts.read_snapshot(target)) == len(result.snapshot)


def test_failures_are_survived(tiny, tmp_path: Path):
    scenario = apply_overrides(tiny, ["failure.period_s=0.5"])
    result, report, _ = run_experiment(scenario, tmp_path / "failures")
    assert result.summary["terminations"] >= 1
    assert report.passed, report.failed()


def test_sweep_in_process(tiny, tmp_path: Path):
    frame = sweep_experiments(tiny, ["workload.clients_per_vm=1,2"], tmp_path / "sweep", parallel = 1)
    assert frame["workload.clients_per_vm"].tolist() == [1, 2]
    assert (tmp_path / "sweep" / "sweep.csv").is_file()
    assert (tmp_path / "sweep" / "workload.clients_per_vm=2" / artifacts.SUMMARY).is_file()


def test_write_heavy_run_verifies(tiny, tmp_path: Path):
    scenario = apply_overrides(tiny, [f"workload.mix.{op}={weight}" for op, weight in WRITE_HEAVY.items()])
    result, report, _ = run_experiment(scenario, tmp_path / "writes")
    ok = result.requests[result.requests["status"] == "ok"]
    assert ok["op"].isin(["create", "mkdirs", "delete", "mv", "chmod"]).sum() > 0
    assert any(event.data.get("request") for event in result.trace.of_kind(TraceKind.commit))
    assert (ok["op"] == "ls").sum() > 0
    assert report.passed, report.failed()
