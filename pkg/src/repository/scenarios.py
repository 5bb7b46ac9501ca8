import itertools
import json
import logging
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from src.conf.config import config
from src.exceptions import ScenarioError
from src.schemas.scenario import Scenario

logger = logging.getLogger(__name__)

BUNDLED_DIR = Path(__file__).resolve().parent.parent / "scenarios"
_TOML_POSITION = re.compile(r"line (\d+), column (\d+)")


def bundled_names() -> list[str]:
    return sorted(path.stem for path in BUNDLED_DIR.glob("*.toml"))


def resolve_source(source: str) -> Path:
    """A scenario argument is either a file path or the name of a bundled scenario."""
    path = Path(source)
    if path.is_file():
        return path
    bundled = BUNDLED_DIR / f"{source}.toml"
    if bundled.is_file():
        return bundled
    raise ScenarioError(f"{source}: no such scenario file or bundled scenario "
                        f"(bundled: {', '.join(bundled_names())})")


def parse_text(text: str, suffix: str, origin: str = "<scenario>") -> dict[str, Any]:
    """
    The parse_text function decodes a scenario document.

    :param text: str: Document body
    :param suffix: str: ``.toml`` or ``.json``
    :param origin: str: Name used in diagnostics
    :return: The decoded mapping
    """
    if suffix == ".json":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as err:
            raise ScenarioError(f"{origin}:{err.lineno}:{err.colno}: {err.msg}", err.lineno, err.colno) from err
    elif suffix == ".toml":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as err:
            match = _TOML_POSITION.search(str(err))
            line, column = (int(match.group(1)), int(match.group(2))) if match else (None, None)
            raise ScenarioError(f"{origin}:{line}:{column}: {err}", line, column) from err
    else:
        raise ScenarioError(f"{origin}: unsupported scenario format {suffix!r}, use .toml or .json")
    if not isinstance(raw, dict):
        raise ScenarioError(f"{origin}: a scenario must be a table/object at the top level")
    return raw


def validate(raw: dict[str, Any], origin: str = "<scenario>") -> Scenario:
    try:
        return Scenario.model_validate(raw)
    except ValidationError as err:
        problems = "; ".join(f"{'.'.join(str(part) for part in error['loc']) or '<root>'}: {error['msg']}"
                             for error in err.errors())
        raise ScenarioError(f"{origin}: {problems}") from err


def load_scenario(source: str | Path) -> Scenario:
    """
    The load_scenario function reads a TOML or JSON scenario, by path or bundled name. A file that
    does not pin a seed gets the process default.

    :param source: str | Path: File path or bundled scenario name
    :return: Validated Scenario
    """
    path = resolve_source(str(source))
    try:
        text = path.read_text(encoding = "utf-8")
    except OSError as err:
        raise ScenarioError(f"{path}: {err.strerror}") from err
    raw = parse_text(text, path.suffix.lower(), str(path))
    raw.setdefault("seed", config.DEFAULT_SEED)
    raw.setdefault("name", path.stem)
    scenario = validate(raw, str(path))
    logger.debug("loaded scenario %s from %s", scenario.name, path)
    return scenario


def parse_value(text: str) -> Any:
    """
    >>> parse_value("0.5"), parse_value("true"), parse_value("null"), parse_value("burst")
    (0.5, True, None, 'burst')
    """
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _split(param: str) -> tuple[str, str]:
    key, sep, value = param.partition("=")
    if not sep or not key.strip():
        raise ScenarioError(f"--param {param!r}: expected key=value")
    return key.strip(), value.strip()


def set_dotted(raw: dict[str, Any], key: str, value: Any) -> None:
    """Set ``a.b.c`` inside a fully populated scenario mapping; unknown keys are refused."""
    node = raw
    parts = key.split(".")
    for depth, part in enumerate(parts):
        if not isinstance(node, dict) or part not in node:
            raise ScenarioError(f"--param {key}: unknown key {'.'.join(parts[:depth + 1])!r}")
        if depth == len(parts) - 1:
            node[part] = value
        else:
            node = node[part]


def apply_overrides(scenario: Scenario, params: list[str] | tuple[str, ...] = ()) -> Scenario:
    """
    The apply_overrides function applies dotted ``key=value`` overrides and validates the result.

    :param scenario: Scenario: Base scenario
    :param params: list[str]: Overrides such as ``platform.concurrency_level=8``
    :return: A new validated Scenario
    """
    raw = scenario.model_dump(mode = "json")
    for param in params:
        key, value = _split(param)
        set_dotted(raw, key, parse_value(value))
    return validate(raw, scenario.name)


def parse_sweep(params: list[str] | tuple[str, ...]) -> list[dict[str, Any]]:
    """
    The parse_sweep function expands ``key=v1,v2`` parameters into the Cartesian product of runs.

    >>> parse_sweep(["workload.n_vms=1,2", "seed=7"])
    [{'workload.n_vms': 1, 'seed': 7}, {'workload.n_vms': 2, 'seed': 7}]
    """
    keys = []
    choices = []
    for param in params:
        key, value = _split(param)
        keys.append(key)
        choices.append([parse_value(part.strip()) for part in value.split(",") if part.strip()])
    return [dict(zip(keys, combination)) for combination in itertools.product(*choices)]


def with_values(scenario: Scenario, values: dict[str, Any]) -> Scenario:
    raw = scenario.model_dump(mode = "json")
    for key, value in values.items():
        set_dotted(raw, key, value)
    return validate(raw, scenario.name)
