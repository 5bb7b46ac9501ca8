from pathlib import Path

import pytest

TINY_SCENARIO = """\
name = "tiny"
seed = 7

[platform]
n_deployments = 2
vcpu_budget = 64
prewarm_per_deployment = 1

[coherence]
subtree_batch_size = 4

[workload]
mode = "closed_loop"
duration_s = 2
n_vms = 1
clients_per_vm = 3

[workload.namespace]
depth = 3
fan_out = 2
files = 12
"""


@pytest.fixture()
def tiny_scenario_file(tmp_path: Path) -> Path:
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_SCENARIO, encoding = "utf-8")
    return path
