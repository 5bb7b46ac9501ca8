import logging

import click

from src.conf.config import config, setup_logging
from src.exceptions import ScenarioError, TraceMissing, VerificationFailed
from src.repository.artifacts import dump_json
from src.repository.scenarios import apply_overrides, bundled_names, load_scenario
from src.services.experiments import run_experiment, sweep_experiments, verify_directory
from src.services.oracle import VerifyReport

logger = logging.getLogger(__name__)

EXIT_USAGE = 2
EXIT_VERIFY = 3

INJECTIONS = {
    "stale-read": "coherence.inject_stale_read=true",
}

SWEEP_COLUMNS = ["completed", "avg_throughput", "peak_throughput", "cost.pay_per_use"]


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err = True)
    raise SystemExit(code)


def _echo_report(report: VerifyReport) -> None:
    for result in report.properties:
        mark = "ok" if result.passed else "FAILED"
        click.echo(f"  {result.name:<28} {mark:<7} checked={result.checked}")
        for violation in result.violations:
            click.echo(f"      {violation}")


def _check(report: VerifyReport | None) -> None:
    if report is None:
        return
    _echo_report(report)
    if not report.passed:
        raise VerificationFailed(f"verification failed: {', '.join(report.failed())}")


def _load(source: str, seed: int | None, params: tuple[str, ...], inject: tuple[str, ...]):
    overrides = list(params) + [INJECTIONS[name] for name in inject]
    if seed is not None:
        overrides.append(f"seed={seed}")
    return apply_overrides(load_scenario(source), overrides)


@click.group()
@click.option("--log-level", default = None, type = click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"],
                                                                  case_sensitive = False),
              help = "Logging level, LOG_LEVEL by default.")
def cli(log_level: str | None) -> None:
    """Seeded simulations of a serverless file-system metadata service."""
    setup_logging(log_level)


@cli.command("scenarios")
def list_scenarios() -> None:
    """List the bundled scenarios."""
    for name in bundled_names():
        click.echo(name)


@cli.command()
@click.argument("scenario")
@click.option("--seed", type = int, default = None, help = "Override the scenario seed.")
@click.option("--out", type = click.Path(file_okay = False), default = None, help = "Output directory.")
@click.option("--param", "params", multiple = True, help = "Dotted override, e.g. platform.n_deployments=8.")
@click.option("--inject", multiple = True, type = click.Choice(sorted(INJECTIONS)), help = "Debug fault.")
@click.option("--verify/--no-verify", default = True, help = "Run the oracle suite after the run.")
def run(scenario: str, seed: int | None, out: str | None, params: tuple[str, ...], inject: tuple[str, ...],
        verify: bool) -> None:
    """
    The run command simulates one scenario (file path or bundled name) and writes its artifacts.
    Exits 2 on a bad scenario and 3 when verification fails.
    """
    try:
        loaded = _load(scenario, seed, params, inject)
        result, report, target = run_experiment(loaded, out, verify)
        summary = result.summary
        click.echo(f"{loaded.name} seed={loaded.seed}: {summary['completed']} completed, "
                   f"avg {summary['avg_throughput']:.1f} ops/s, peak {summary['peak_throughput']:.0f} ops/s")
        click.echo(f"artifacts in {target}")
        _check(report)
    except (ScenarioError, TraceMissing) as err:
        _fail(str(err), EXIT_USAGE)
    except VerificationFailed as err:
        _fail(str(err), EXIT_VERIFY)


@cli.command()
@click.argument("scenario")
@click.option("--param", "params", multiple = True, required = True, help = "Swept key, e.g. workload.n_vms=1,2,4.")
@click.option("--parallel", type = click.IntRange(min = 1), default = None,
              help = f"Worker processes (default {config.SWEEP_WORKERS}).")
@click.option("--seed", type = int, default = None, help = "Override the scenario seed.")
@click.option("--out", type = click.Path(file_okay = False), default = None, help = "Root output directory.")
@click.option("--verify/--no-verify", default = False, help = "Verify every run.")
def sweep(scenario: str, params: tuple[str, ...], parallel: int | None, seed: int | None, out: str | None,
          verify: bool) -> None:
    """The sweep command runs the Cartesian product of swept values and writes sweep.csv."""
    try:
        loaded = _load(scenario, seed, (), ())
        frame = sweep_experiments(loaded, params, out, parallel, verify)
        swept = [key for key in frame.columns if key in {p.partition("=")[0].strip() for p in params}]
        click.echo(frame[swept + SWEEP_COLUMNS].to_string(index = False))
        if verify and not frame["verified"].all():
            raise VerificationFailed("verification failed for at least one swept run")
    except (ScenarioError, TraceMissing) as err:
        _fail(str(err), EXIT_USAGE)
    except VerificationFailed as err:
        _fail(str(err), EXIT_VERIFY)


@cli.command()
@click.argument("run_dir", type = click.Path(file_okay = False))
def verify(run_dir: str) -> None:
    """The verify command re-runs the oracle suite over a written run directory."""
    try:
        report = verify_directory(run_dir)
        click.echo(dump_json({"passed": report.passed}).strip())
        _check(report)
    except (ScenarioError, TraceMissing) as err:
        _fail(str(err), EXIT_USAGE)
    except VerificationFailed as err:
        _fail(str(err), EXIT_VERIFY)
