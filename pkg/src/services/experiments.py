import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any

import pandas as pd

from src.conf.config import config
from src.repository import artifacts
from src.repository.scenarios import parse_sweep, with_values
from src.schemas.scenario import Scenario
from src.services.oracle import VerifyReport, run_verification
from src.services.simulation import SimulationResult, run_scenario

logger = logging.getLogger(__name__)


def output_dir(scenario: Scenario, out: str | Path | None = None) -> Path:
    if out is not None:
        return Path(out)
    if scenario.out is not None:
        return Path(scenario.out)
    return Path(config.OUTPUT_DIR) / scenario.name


def verify_directory(out_dir: str | Path) -> VerifyReport:
    """
    The verify_directory function runs the oracle suite over a written run and stores the report
    next to the run's artifacts.

    :param out_dir: str | Path: Directory written by run_experiment
    :return: VerifyReport
    """
    trace = artifacts.read_trace(out_dir)
    snapshot = artifacts.read_snapshot(out_dir)
    requests = artifacts.read_requests(out_dir)
    report = run_verification(requests, trace, snapshot)
    artifacts.write_report(report, out_dir)
    return report


def run_experiment(scenario: Scenario, out: str | Path | None = None,
                   verify: bool = True) -> tuple[SimulationResult, VerifyReport | None, Path]:
    """
    The run_experiment function runs one scenario, writes its artifacts and optionally verifies them.

    :param scenario: Scenario: Validated scenario
    :param out: str | Path | None: Output directory; defaults to the scenario's or OUTPUT_DIR/<name>
    :param verify: bool: Run the oracle suite on the written artifacts
    :return: (result, report or None, output directory)
    """
    target = output_dir(scenario, out)
    result = run_scenario(scenario)
    artifacts.write_run(result, target)
    report = verify_directory(target) if verify else None
    return result, report, target


def _slug(values: dict[str, Any]) -> str:
    return "__".join(f"{key}={value}" for key, value in values.items()) or "base"


def _sweep_one(payload: tuple[str, dict[str, Any], str, bool]) -> dict[str, Any]:
    scenario_json, values, out, verify = payload
    scenario = with_values(Scenario.model_validate_json(scenario_json), values)
    result, report, _ = run_experiment(scenario, out, verify)
    row = dict(values)
    row.update(artifacts.flatten(result.summary))
    row["verified"] = report.passed if report is not None else None
    return row


def sweep_experiments(scenario: Scenario, params: list[str] | tuple[str, ...], out: str | Path | None = None,
                      parallel: int | None = None, verify: bool = False) -> pd.DataFrame:
    """
    The sweep_experiments function runs one simulation per combination of swept values and combines
    their summaries into ``sweep.csv``. Runs share nothing, so they may execute in worker processes.

    :param scenario: Scenario: Base scenario
    :param params: list[str]: ``key=v1,v2,...`` parameters
    :param out: str | Path | None: Root output directory
    :param parallel: int | None: Worker processes, SWEEP_WORKERS by default; 1 runs in-process
    :param verify: bool: Verify every run
    :return: DataFrame with one row per run
    """
    root = output_dir(scenario, out)
    combinations = parse_sweep(params)
    for values in combinations:
        with_values(scenario, values)
    payloads = [(scenario.model_dump_json(), values, str(root / _slug(values)), verify) for values in combinations]
    workers = min(parallel or config.SWEEP_WORKERS, len(payloads))
    logger.info("sweeping %s over %d runs with %d workers", scenario.name, len(payloads), workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers = workers) as pool:
            rows = list(pool.map(_sweep_one, payloads))
    else:
        rows = [_sweep_one(payload) for payload in payloads]
    artifacts.write_sweep(rows, root)
    return pd.DataFrame(rows)
