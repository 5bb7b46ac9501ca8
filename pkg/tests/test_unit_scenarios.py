import unittest
from pathlib import Path

import pytest

from src.exceptions import ScenarioError, TraceMissing
from src.repository import artifacts
from src.repository.scenarios import apply_overrides, bundled_names, load_scenario, parse_sweep, parse_text, \
    with_values
from src.schemas.scenario import Scenario, WorkloadMode


class TestParsing(unittest.TestCase):

    def test_toml_error_has_position(self):
        with self.assertRaises(ScenarioError) as caught:
            parse_text('name = "x"\nseed = \n', ".toml", "bad.toml")
        self.assertEqual(caught.exception.line, 2)
        self.assertIsNotNone(caught.exception.column)
        self.assertTrue(str(caught.exception).startswith("bad.toml:2:"))

    def test_json_error_has_position(self):
        with self.assertRaises(ScenarioError) as caught:
            parse_text('{"seed": 1,\n}', ".json", "bad.json")
        self.assertEqual(caught.exception.line, 2)
        self.assertEqual(caught.exception.column, 1)

    def test_top_level_must_be_a_table(self):
        with self.assertRaises(ScenarioError):
            parse_text("[1, 2]", ".json")

    def test_unsupported_format(self):
        with self.assertRaises(ScenarioError):
            parse_text("seed: 1", ".yaml")

    def test_unknown_bundled_name(self):
        with self.assertRaises(ScenarioError) as caught:
            load_scenario("no_such_scenario")
        self.assertIn("spotify_25k", str(caught.exception))


class TestOverrides(unittest.TestCase):

    def setUp(self) -> None:
        self.base = Scenario(name = "base")

    def test_dotted_override(self):
        scenario = apply_overrides(self.base, ["platform.n_deployments=8", "workload.mode=closed_loop",
                                               "platform.max_instances_per_deployment=3"])
        self.assertEqual(scenario.platform.n_deployments, 8)
        self.assertIs(scenario.workload.mode, WorkloadMode.closed_loop)
        self.assertEqual(scenario.platform.max_instances_per_deployment, 3)
        self.assertEqual(self.base.platform.n_deployments, 4)

    def test_null_override(self):
        scenario = apply_overrides(Scenario(failure = {"period_s": 30}), ["failure.period_s=null"])
        self.assertIsNone(scenario.failure.period_s)

    def test_unknown_key(self):
        with self.assertRaises(ScenarioError) as caught:
            apply_overrides(self.base, ["platform.bogus=1"])
        self.assertIn("platform.bogus", str(caught.exception))

    def test_invalid_value_names_field(self):
        with self.assertRaises(ScenarioError) as caught:
            apply_overrides(self.base, ["platform.n_deployments=0"])
        self.assertIn("platform.n_deployments", str(caught.exception))

    def test_mix_must_total_100(self):
        with self.assertRaises(ScenarioError):
            apply_overrides(self.base, ["workload.mix.read=10"])

    def test_missing_equals(self):
        with self.assertRaises(ScenarioError):
            apply_overrides(self.base, ["platform.n_deployments"])

    def test_sweep_product(self):
        runs = parse_sweep(["platform.n_deployments=2,4", "workload.n_vms=1,2,3"])
        self.assertEqual(len(runs), 6)
        self.assertEqual(runs[-1], {"platform.n_deployments": 4, "workload.n_vms": 3})
        self.assertEqual(with_values(self.base, runs[-1]).workload.n_vms, 3)


class TestBundled(unittest.TestCase):

    def test_names(self):
        self.assertEqual(bundled_names(), ["autoscaling_ablation", "client_scaling", "failure_30s", "reduced_cache",
                                           "resource_scaling", "spotify_25k", "spotify_50k"])

    def test_every_bundled_scenario_validates(self):
        for name in bundled_names():
            scenario = load_scenario(name)
            self.assertEqual(scenario.name, name)

    def test_failure_scenario(self):
        self.assertEqual(load_scenario("failure_30s").failure.period_s, 30)


def test_load_from_file(tiny_scenario_file: Path):
    scenario = load_scenario(tiny_scenario_file)
    assert scenario.name == "tiny"
    assert scenario.seed == 7
    assert scenario.platform.n_deployments == 2
    assert scenario.workload.namespace.files == 12


def test_file_without_seed_gets_default(tmp_path: Path):
    path = tmp_path / "plain.json"
    path.write_text('{"workload": {"duration_s": 5}}', encoding = "utf-8")
    scenario = load_scenario(path)
    assert scenario.name == "plain"
    assert scenario.seed == 1
    assert scenario.workload.duration_s == 5


def test_missing_artifacts(tmp_path: Path):
    with pytest.raises(TraceMissing):
        artifacts.read_trace(tmp_path)
    with pytest.raises(TraceMissing):
        artifacts.read_snapshot(tmp_path)


def test_sweep_file(tmp_path: Path):
    path = artifacts.write_sweep([{"workload.n_vms": 1, "completed": 10}, {"workload.n_vms": 2, "completed": 19}],
                                 tmp_path / "sweep")
    assert path.read_text(encoding = "utf-8").splitlines() == ["workload.n_vms,completed", "1,10", "2,19"]
