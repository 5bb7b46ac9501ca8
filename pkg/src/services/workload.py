import itertools
import logging
from collections.abc import Generator
from dataclasses import dataclass, field

import numpy as np

from src.entity.models import INodeKind
from src.exceptions import GiveUp, OperationFailed
from src.schemas.inode import INodeRecord, root_record
from src.schemas.scenario import NamespaceSeed, OpKind, OpMix, WorkloadConfig, WorkloadMode, US_PER_S, seconds_to_us
from src.services.client import ClientEndpoint, ClientFleet
from src.services.kernel import EventKind, SimKernel
from src.services.partitioning import is_prefix, join, parent_directory
from src.services.platform import Platform

logger = logging.getLogger(__name__)

CHMOD_MODES = (0o755, 0o750, 0o700, 0o644)


def next_interval_target(rng: np.random.Generator, shape: float = 2.0, scale: float = 25_000.0,
                         cap: float | None = 7.0) -> float:
    """
    The next_interval_target function draws one interval's throughput target from a Pareto
    distribution by inverse CDF, ``scale·U^(−1/shape)``, clamped to ``cap·scale``.

    :param rng: np.random.Generator: Generator's random stream
    :param shape: float: Pareto shape α > 1
    :param scale: float: Pareto scale x_t, the minimum target
    :param cap: float | None: Clamp multiplier, None for the raw distribution
    :return: Target operations per second
    """
    u = 1.0 - rng.random()
    target = scale * u ** (-1.0 / shape)
    if cap is not None:
        target = min(target, cap * scale)
    return float(target)


@dataclass(frozen = True)
class QuotaPlan:
    per_vm: float
    per_client: float


def per_client_quota(delta: float, n_vms: int, clients_per_vm: int = 1) -> QuotaPlan:
    """
    >>> per_client_quota(25_000, 8).per_vm
    3125.0
    """
    if n_vms < 1:
        raise ValueError(f"need at least one VM, got {n_vms}")
    per_vm = delta / n_vms
    return QuotaPlan(per_vm = per_vm, per_client = per_vm / clients_per_vm)


@dataclass
class RolloverLedger:
    """Operations a VM owes: this second's share plus whatever earlier seconds did not issue."""
    carried: float = 0.0

    def target(self, per_vm: float) -> float:
        return per_vm + self.carried

    def settle(self, per_vm: float, issued: int) -> float:
        if per_vm <= 0 and self.carried <= 0:
            return self.carried
        self.carried = max(0.0, self.target(per_vm) - issued)
        return self.carried


@dataclass
class NamespaceView:
    """Generator-side picture of live paths, updated from completed operations."""
    dirs: list[str] = field(default_factory = lambda: ["/"])
    files: list[str] = field(default_factory = list)
    _dir_index: dict[str, int] = field(default_factory = lambda: {"/": 0})
    _file_index: dict[str, int] = field(default_factory = dict)

    @staticmethod
    def _add(items: list[str], index: dict[str, int], path: str) -> None:
        if path not in index:
            index[path] = len(items)
            items.append(path)

    @staticmethod
    def _remove(items: list[str], index: dict[str, int], path: str) -> None:
        position = index.pop(path, None)
        if position is None:
            return
        last = items.pop()
        if position < len(items):
            items[position] = last
            index[last] = position

    def add_dir(self, path: str) -> None:
        self._add(self.dirs, self._dir_index, path)

    def add_file(self, path: str) -> None:
        self._add(self.files, self._file_index, path)

    def remove(self, path: str) -> None:
        if path in self._file_index:
            self._remove(self.files, self._file_index, path)
            return
        for items, index in ((self.dirs, self._dir_index), (self.files, self._file_index)):
            for doomed in [p for p in items if is_prefix(path, p) and p != "/"]:
                self._remove(items, index, doomed)

    def move(self, src: str, dst: str) -> None:
        if src in self._file_index:
            self._remove(self.files, self._file_index, src)
            self.add_file(dst)
            return
        for items, index in ((self.dirs, self._dir_index), (self.files, self._file_index)):
            moved = [p for p in items if is_prefix(src, p)]
            for path in moved:
                self._remove(items, index, path)
            for path in moved:
                self._add(items, index, dst + path[len(src):])


@dataclass(frozen = True)
class PickedOp:
    kind: OpKind
    path: str
    dst: str | None = None
    perms: int | None = None


class OperationPicker:
    def __init__(self, mix: OpMix, view: NamespaceView, rng: np.random.Generator, tag: str = ""):
        weights = mix.weights()
        self.kinds = [kind for kind in OpKind if weights[kind] > 0]
        total = sum(weights[kind] for kind in self.kinds)
        self.probabilities = np.array([weights[kind] / total for kind in self.kinds])
        self.view = view
        self.rng = rng
        self.tag = tag
        self._names = itertools.count()

    def _any(self, items: list[str]) -> str:
        return items[int(self.rng.integers(len(items)))]

    def _entry(self) -> str:
        total = len(self.view.dirs) - 1 + len(self.view.files)
        if total <= 0:
            return "/"
        k = int(self.rng.integers(total))
        if k < len(self.view.files):
            return self.view.files[k]
        return self.view.dirs[1 + k - len(self.view.files)]

    def pick_operation(self) -> PickedOp:
        """
        The pick_operation function draws an operation kind by mix weight and a target for it:
        files for read/stat, directories for ls/mkdirs/create, any entry for mv/delete/chmod.

        :return: PickedOp with normalized paths
        """
        kind = self.kinds[int(self.rng.choice(len(self.kinds), p = self.probabilities))]
        view = self.view
        if kind in (OpKind.read, OpKind.stat):
            return PickedOp(kind, self._any(view.files) if view.files else self._any(view.dirs))
        if kind is OpKind.ls:
            return PickedOp(kind, self._any(view.dirs))
        if kind is OpKind.create:
            return PickedOp(kind, join(self._any(view.dirs), f"n{self.tag}{next(self._names)}"))
        if kind is OpKind.mkdirs:
            return PickedOp(kind, join(self._any(view.dirs), f"m{self.tag}{next(self._names)}"))
        if kind is OpKind.chmod:
            return PickedOp(kind, self._entry(), perms = CHMOD_MODES[int(self.rng.integers(len(CHMOD_MODES)))])
        if kind is OpKind.delete:
            return PickedOp(kind, self._entry())
        src = self._entry()
        for _ in range(8):
            target_dir = self._any(view.dirs)
            if not is_prefix(src, target_dir):
                return PickedOp(kind, src, dst = join(target_dir, f"v{self.tag}{next(self._names)}"))
        return PickedOp(kind, src, dst = join(parent_directory(src), f"v{self.tag}{next(self._names)}"))


def build_namespace(seed: NamespaceSeed, next_id) -> tuple[list[INodeRecord], list[str], list[str]]:
    """
    Directory tree of ``depth − 1`` directory levels with ``fan_out`` children each, and ``files``
    files spread round-robin over the deepest directories.

    :return: (records excluding the root, directory paths, file paths)
    """
    records = []
    dirs = []
    level = [(root_record(), "/")]
    for depth in range(1, seed.depth):
        below = []
        for parent, parent_path in level:
            for i in range(seed.fan_out):
                record = INodeRecord(id = next_id(), parent = parent.id, name = f"d{depth}_{i}",
                                     kind = INodeKind.directory)
                path = join(parent_path, record.name)
                records.append(record)
                dirs.append(path)
                below.append((record, path))
        level = below
    files = []
    for i in range(seed.files):
        parent, parent_path = level[i % len(level)]
        record = INodeRecord(id = next_id(), parent = parent.id, name = f"f{i}", kind = INodeKind.file)
        records.append(record)
        files.append(join(parent_path, record.name))
    return records, dirs, files


def failure_schedule(period_s: float | None, duration_s: float) -> list[int]:
    """
    >>> len(failure_schedule(30, 300))
    10
    >>> failure_schedule(400, 300)
    []
    """
    if period_s is None:
        return []
    if period_s <= 0:
        raise ValueError("failure period must be positive")
    times = []
    k = 1
    while k * period_s <= duration_s + 1e-9:
        times.append(seconds_to_us(k * period_s))
        k += 1
    return times


@dataclass(eq = False)
class _VmQuota:
    tokens: float = 0.0
    issued: int = 0
    refill: object = None


class WorkloadDriver:
    """Issues operations from the fleet's clients according to the burst or closed-loop schedule."""

    def __init__(self, kernel: SimKernel, fleet: ClientFleet, settings: WorkloadConfig, view: NamespaceView):
        self.kernel = kernel
        self.fleet = fleet
        self.settings = settings
        self.view = view
        self.rng = kernel.rng("workload")
        self.end = seconds_to_us(settings.duration_s)
        self.targets: list[tuple[int, float]] = []
        self.ledgers = [RolloverLedger() for _ in fleet.vms]
        self.quotas = [_VmQuota(refill = kernel.event()) for _ in fleet.vms]
        self.pickers = {client.client_id: OperationPicker(settings.mix, view, kernel.rng("picker", client.client_id),
                                                          tag = f"{client.client_id}_")
                        for client in fleet.clients}
        self.in_flight = 0

    def start(self) -> None:
        if self.settings.mode is WorkloadMode.burst:
            self.kernel.process(self._schedule())
        for client in self.fleet.clients:
            self.kernel.process(self._client_loop(client))

    def _schedule(self) -> Generator:
        interval = seconds_to_us(self.settings.interval_s)
        per_vm = 0.0
        next_interval = 0
        while self.kernel.now < self.end:
            if self.kernel.now >= next_interval:
                delta = next_interval_target(self.rng, self.settings.pareto_shape, self.settings.pareto_scale,
                                             self.settings.burst_cap) * self.settings.rate_scale
                self.targets.append((self.kernel.now, delta))
                per_vm = per_client_quota(delta, len(self.fleet.vms), self.settings.clients_per_vm).per_vm
                next_interval += interval
            for ledger, quota in zip(self.ledgers, self.quotas):
                quota.tokens = ledger.target(per_vm)
                quota.issued = 0
                refill, quota.refill = quota.refill, self.kernel.event()
                refill.succeed()
            yield self.kernel.timer(US_PER_S, EventKind.interval_tick)
            for ledger, quota in zip(self.ledgers, self.quotas):
                ledger.settle(per_vm, quota.issued)
        for quota in self.quotas:
            quota.tokens = 0
            quota.refill.succeed()

    def _client_loop(self, client: ClientEndpoint) -> Generator:
        picker = self.pickers[client.client_id]
        quota = self.quotas[client.vm.vm_id]
        closed_loop = self.settings.mode is WorkloadMode.closed_loop
        while self.kernel.now < self.end:
            if not closed_loop:
                if quota.tokens < 1:
                    yield quota.refill
                    continue
                quota.tokens -= 1
                quota.issued += 1
            picked = picker.pick_operation()
            self.in_flight += 1
            try:
                yield from client.submit(picked.kind, picked.path, picked.dst, picked.perms)
                self._observe(picked)
            except OperationFailed:
                pass
            except GiveUp:
                pass
            finally:
                self.in_flight -= 1

    def _observe(self, picked: PickedOp) -> None:
        if picked.kind is OpKind.create:
            self.view.add_file(picked.path)
        elif picked.kind is OpKind.mkdirs:
            self.view.add_dir(picked.path)
        elif picked.kind is OpKind.delete:
            self.view.remove(picked.path)
        elif picked.kind is OpKind.mv:
            self.view.move(picked.path, picked.dst)


def populate(store, seed: NamespaceSeed) -> NamespaceView:
    records, dirs, files = build_namespace(seed, store.allocate_id)
    store.populate(records)
    view = NamespaceView()
    for path in dirs:
        view.add_dir(path)
    for path in files:
        view.add_file(path)
    logger.info("populated namespace with %d directories and %d files", len(dirs), len(files))
    return view


def failure_injector(kernel: SimKernel, platform: Platform, times: list[int]) -> Generator:
    """Terminates one live instance at each time, visiting deployments round-robin."""
    rng = kernel.rng("failures")
    turn = 0
    for at in times:
        if at > kernel.now:
            yield kernel.timer(at - kernel.now, EventKind.instance_crash)
        for step in range(platform.n_deployments):
            deployment = (turn + step) % platform.n_deployments
            live = platform.warm_instances(deployment)
            if live:
                victim = live[int(rng.integers(len(live)))]
                platform.terminate_instance(victim.instance_id, reason = "fault injection terminated")
                turn = deployment + 1
                break
        else:
            logger.info("t=%d no live instance to terminate", kernel.now)
