import json
import logging
from pathlib import Path
from typing import Any

import pandas as pd

from src.exceptions import TraceMissing
from src.services.metrics import THROUGHPUT_COLUMNS
from src.services.oracle import VerifyReport
from src.services.simulation import SimulationResult
from src.services.trace import ProtocolTrace

logger = logging.getLogger(__name__)

THROUGHPUT = "throughput.csv"
SUMMARY = "summary.json"
REQUESTS = "requests.csv"
PROTOCOL_TRACE = "protocol_trace.jsonl"
SNAPSHOT = "snapshot.jsonl"
PLATFORM_TRACE = "platform_trace.csv"
SCENARIO = "scenario.json"
VERIFY_REPORT = "verify_report.json"


def dump_json(data: Any) -> str:
    return json.dumps(data, sort_keys = True, indent = 2) + "\n"


def _write_lines(path: Path, lines: list[str]) -> None:
    path.write_text("".join(line + "\n" for line in lines), encoding = "utf-8")


def write_run(result: SimulationResult, out_dir: str | Path) -> list[Path]:
    """
    The write_run function writes every artifact of one run into ``out_dir``.

    :param result: SimulationResult: Finished run
    :param out_dir: str | Path: Output directory, created when missing
    :return: Paths written
    """
    out = Path(out_dir)
    out.mkdir(parents = True, exist_ok = True)
    written = []

    path = out / THROUGHPUT
    result.throughput[THROUGHPUT_COLUMNS].to_csv(path, index = False)
    written.append(path)

    for op, cdf in result.latency_cdfs().items():
        path = out / f"latency_cdf_{op}.csv"
        cdf.table.to_csv(path, index = False)
        written.append(path)

    path = out / SUMMARY
    path.write_text(dump_json(result.summary), encoding = "utf-8")
    written.append(path)

    path = out / REQUESTS
    result.requests.to_csv(path, index = False)
    written.append(path)

    path = out / PROTOCOL_TRACE
    _write_lines(path, result.trace.lines())
    written.append(path)

    path = out / SNAPSHOT
    _write_lines(path, [json.dumps(row, sort_keys = True, separators = (",", ":")) for row in result.snapshot])
    written.append(path)

    path = out / PLATFORM_TRACE
    result.platform_trace.to_csv(path, index = False)
    written.append(path)

    path = out / SCENARIO
    path.write_text(dump_json(result.scenario.model_dump(mode = "json")), encoding = "utf-8")
    written.append(path)

    logger.info("wrote %d artifacts to %s", len(written), out)
    return written


def _require(out_dir: str | Path, name: str) -> Path:
    path = Path(out_dir) / name
    if not path.is_file():
        raise TraceMissing(f"{path}: missing, was the run written to {out_dir}?")
    return path


def read_trace(out_dir: str | Path) -> ProtocolTrace:
    with _require(out_dir, PROTOCOL_TRACE).open(encoding = "utf-8") as fh:
        return ProtocolTrace.from_lines(fh)


def read_snapshot(out_dir: str | Path) -> list[dict]:
    with _require(out_dir, SNAPSHOT).open(encoding = "utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_requests(out_dir: str | Path) -> list[dict]:
    """Request records with empty cells as None."""
    frame = pd.read_csv(_require(out_dir, REQUESTS), dtype = {"request_id": str, "op": str, "status": str})
    return frame.astype(object).where(frame.notna(), None).to_dict("records")


def read_summary(out_dir: str | Path) -> dict:
    return json.loads(_require(out_dir, SUMMARY).read_text(encoding = "utf-8"))


def write_report(report: VerifyReport, out_dir: str | Path) -> Path:
    path = Path(out_dir) / VERIFY_REPORT
    path.write_text(dump_json(report.model_dump(mode = "json")), encoding = "utf-8")
    return path


def flatten(summary: dict, prefix: str = "") -> dict[str, Any]:
    """
    >>> flatten({"cost": {"serverful": 1.5}, "completed": 3})
    {'cost.serverful': 1.5, 'completed': 3}
    """
    flat = {}
    for key, value in summary.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, f"{name}."))
        else:
            flat[name] = value
    return flat


def write_sweep(rows: list[dict], out_dir: str | Path, name: str = "sweep.csv") -> Path:
    out = Path(out_dir)
    out.mkdir(parents = True, exist_ok = True)
    path = out / name
    pd.DataFrame(rows).to_csv(path, index = False)
    return path
