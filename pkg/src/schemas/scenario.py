import enum
import math
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

US_PER_MS = 1_000
US_PER_S = 1_000_000


def seconds_to_us(seconds: float) -> int:
    return int(round(seconds * US_PER_S))


def ms_to_us(ms: float) -> int:
    return int(round(ms * US_PER_MS))


class StrictModel(BaseModel):
    model_config = ConfigDict(extra = "forbid", frozen = True)


class LatencyRange(StrictModel):
    min_us: int = Field(gt = 0)
    max_us: int = Field(gt = 0)

    @model_validator(mode = "after")
    def check_order(self):
        if self.min_us > self.max_us:
            raise ValueError(f"min_us {self.min_us} exceeds max_us {self.max_us}")
        return self

    @property
    def midpoint(self) -> float:
        return (self.min_us + self.max_us) / 2


class LatencyConfig(StrictModel):
    tcp: LatencyRange = LatencyRange(min_us = 1_000, max_us = 2_000)
    http: LatencyRange = LatencyRange(min_us = 8_000, max_us = 20_000)
    store: LatencyRange = LatencyRange(min_us = 1_000, max_us = 3_000)
    cold_start: LatencyRange = LatencyRange(min_us = 300_000, max_us = 800_000)
    service: LatencyRange = LatencyRange(min_us = 200, max_us = 600)


class PlatformConfig(StrictModel):
    n_deployments: int = Field(4, ge = 1)
    concurrency_level: int = Field(4, ge = 1)
    vcpu_budget: float = Field(512.0, gt = 0)
    per_instance_vcpu: float = Field(6.25, gt = 0)
    mem_gb: float = Field(30.0, gt = 0)
    idle_timeout_s: float = Field(60.0, gt = 0)
    reclaim_interval_s: float = Field(1.0, gt = 0)
    max_instances_per_deployment: int | None = Field(None, ge = 1)
    prewarm_per_deployment: int = Field(0, ge = 0)
    evict_to_admit: bool = False

    @model_validator(mode = "after")
    def check_budget(self):
        if self.per_instance_vcpu > self.vcpu_budget:
            raise ValueError("per_instance_vcpu exceeds vcpu_budget: no instance could ever start")
        return self

    @property
    def cpu_slots(self) -> int:
        return max(1, int(self.per_instance_vcpu))


class PolicyConfig(StrictModel):
    replacement_probability: float = Field(0.01, ge = 0.0, le = 1.0)
    anti_thrash_enabled: bool = True
    anti_thrash_threshold: float = Field(2.5, gt = 1.0)
    latency_window: int = Field(100, ge = 1)
    straggler_enabled: bool = True
    straggler_k: float = Field(10.0, gt = 1.0)
    backoff_base_ms: float = Field(50.0, gt = 0)
    backoff_cap_ms: float = Field(5_000.0, gt = 0)
    max_attempts: int = Field(8, ge = 1)
    tcp_timeout_ms: float = Field(1_500.0, gt = 0)
    http_timeout_ms: float = Field(4_000.0, gt = 0)
    max_clients_per_tcp_server: int | None = Field(None, ge = 1)
    result_cache_ttl_s: float = Field(30.0, gt = 0)


class CoherenceConfig(StrictModel):
    round_timeout_s: float = Field(10.0, gt = 0)
    subtree_batch_size: int = Field(512, ge = 1)
    inject_stale_read: bool = False


class StoreConfig(StrictModel):
    lock_wait_timeout_s: float = Field(5.0, gt = 0)
    max_write_retries: int = Field(3, ge = 1)


class CacheConfig(StrictModel):
    capacity: int | None = Field(None, ge = 1)


class OpKind(str, enum.Enum):
    create = "create"
    mkdirs = "mkdirs"
    delete = "delete"
    mv = "mv"
    read = "read"
    stat = "stat"
    ls = "ls"

    chmod = "chmod"

    @property
    def is_write(self) -> bool:
        return self not in READ_KINDS


READ_KINDS = frozenset({OpKind.read, OpKind.stat, OpKind.ls})


class OpMix(StrictModel):
    create: float = Field(2.7, ge = 0)
    mkdirs: float = Field(0.02, ge = 0)
    delete: float = Field(0.75, ge = 0)
    mv: float = Field(1.3, ge = 0)
    read: float = Field(69.22, ge = 0)
    stat: float = Field(17.0, ge = 0)
    ls: float = Field(9.01, ge = 0)
    chmod: float = Field(0.0, ge = 0)

    @model_validator(mode = "after")
    def check_total(self):
        total = sum(self.weights().values())
        if not math.isclose(total, 100.0, abs_tol = 1e-9):
            raise ValueError(f"op mix weights must sum to 100, got {total!r}")
        return self

    def weights(self) -> dict[OpKind, float]:
        return {kind: getattr(self, kind.value) for kind in OpKind}

    @property
    def read_share(self) -> float:
        return self.read + self.stat + self.ls


class WorkloadMode(str, enum.Enum):
    burst = "burst"
    closed_loop = "closed_loop"


class NamespaceSeed(StrictModel):
    depth: int = Field(4, ge = 1)
    fan_out: int = Field(10, ge = 1)
    files: int = Field(10_000, ge = 0)


class WorkloadConfig(StrictModel):
    mode: WorkloadMode = WorkloadMode.burst
    duration_s: float = Field(300.0, gt = 0)
    interval_s: float = Field(15.0, gt = 0)
    pareto_shape: float = Field(2.0, gt = 1.0)
    pareto_scale: float = Field(25_000.0, gt = 0)
    burst_cap: float | None = Field(7.0, ge = 1.0)
    rate_scale: float = Field(1.0, gt = 0)
    n_vms: int = Field(8, ge = 1)
    clients_per_vm: int = Field(128, ge = 1)
    warmup_s: float = Field(0.0, ge = 0)
    mix: OpMix = OpMix()
    namespace: NamespaceSeed = NamespaceSeed()

    @property
    def n_clients(self) -> int:
        return self.n_vms * self.clients_per_vm


class FailureConfig(StrictModel):
    period_s: float | None = Field(None, gt = 0)


class CostConfig(StrictModel):
    gb_second_price: float = Field(0.0000166667, ge = 0)
    per_million_requests: float = Field(0.20, ge = 0)
    billing_granularity_ms: int = Field(1, ge = 1)
    serverful_vm_hour_price: float = Field(7.68, ge = 0)
    serverful_vm_vcpus: float = Field(16.0, gt = 0)
    serverful_cluster_vcpus: float | None = Field(None, gt = 0)


class Scenario(StrictModel):
    schema_version: Literal[1] = 1
    name: str = "custom"
    seed: int = 1
    out: str | None = None
    platform: PlatformConfig = PlatformConfig()
    latency: LatencyConfig = LatencyConfig()
    policy: PolicyConfig = PolicyConfig()
    coherence: CoherenceConfig = CoherenceConfig()
    store: StoreConfig = StoreConfig()
    cache: CacheConfig = CacheConfig()
    workload: WorkloadConfig = WorkloadConfig()
    failure: FailureConfig = FailureConfig()
    cost: CostConfig = CostConfig()

    @field_validator("name")
    @classmethod
    def validate_name(cls, v: str):
        if not v or "/" in v:
            raise ValueError("scenario name must be a non-empty file-name-safe string")
        return v
