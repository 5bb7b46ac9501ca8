"""
Cache coherence for NameNode caches.

Every write holds exclusive store locks on the metadata it changes, then runs one invalidation
round: the coordinator delivers an INV to every live instance of each target deployment and the
write may commit only once every instance still alive has acknowledged. Recursive ``mv`` and
``delete`` run under a subtree lock with a single prefix invalidation and execute their per-INode
work in batches, some of them on helper instances of other deployments.
"""
import enum
import itertools
import logging
from collections.abc import Callable, Generator, Iterable
from dataclasses import dataclass, field

import simpy

from src.entity.models import SubtreeOpKind
from src.exceptions import AlreadyExists, FileNotFound, InvalidMove, NotADirectory, RoundTimeout, StoreError, \
    TxnAborted
from src.repository.namespace import NamespaceStore
from src.schemas.inode import INodeRecord, PathResolution, SubtreeNode, SubtreeOpEntry
from src.schemas.rpc import RpcResponse
from src.schemas.scenario import CoherenceConfig, seconds_to_us
from src.services.cache import CacheTrie
from src.services.kernel import LatencyKind, SimKernel
from src.services.partitioning import basename, components, is_prefix, parent_directory
from src.services.platform import FunctionInstance, Platform
from src.services.trace import ProtocolTrace, TraceKind

logger = logging.getLogger(__name__)


class InvalidationKind(str, enum.Enum):
    point = "point"
    prefix = "prefix"


@dataclass(frozen = True)
class Invalidation:
    round_id: int
    kind: InvalidationKind
    issuer: str
    targets: frozenset[int]
    ids: tuple[int, ...] = ()
    prefix: str | None = None

    def apply(self, cache: CacheTrie) -> int:
        if self.kind is InvalidationKind.prefix:
            return cache.invalidate_prefix(self.prefix)
        return sum(cache.invalidate(inode_id) for inode_id in self.ids)


@dataclass(eq = False)
class CoherenceRound:
    invalidation: Invalidation
    leader: str
    required: set[str]
    opened_at: int
    done: simpy.Event
    acked: set[str] = field(default_factory = set)

    @property
    def missing(self) -> set[str]:
        return self.required - self.acked


class Coordinator:
    """
    Liveness tracking and INV/ACK delivery. Instances enter the live set when they finish a cold
    start and leave it on termination; a pending round stops waiting for an instance that leaves.
    """

    def __init__(self, kernel: SimKernel, n_deployments: int, settings: CoherenceConfig | None = None,
                 trace: ProtocolTrace | None = None):
        self.kernel = kernel
        self.n_deployments = n_deployments
        self.settings = settings or CoherenceConfig()
        self.trace = trace or ProtocolTrace()
        self.rng = kernel.rng("coordinator")
        self.live: list[dict[str, FunctionInstance]] = [{} for _ in range(n_deployments)]
        self.rounds: dict[int, CoherenceRound] = {}
        self._round_ids = itertools.count(1)
        self.inv_messages = 0
        self.inv_deliveries = 0
        self.acks = 0
        self.rounds_completed = 0

    def join(self, instance: FunctionInstance) -> None:
        self.live[instance.deployment][instance.instance_id] = instance
        self.trace.record(self.kernel.now, TraceKind.instance_join, instance = instance.instance_id,
                          deployment = instance.deployment)

    def leave(self, instance: FunctionInstance) -> None:
        if self.live[instance.deployment].pop(instance.instance_id, None) is None:
            return
        self.trace.record(self.kernel.now, TraceKind.instance_leave, instance = instance.instance_id,
                          deployment = instance.deployment)
        for round_id, pending in list(self.rounds.items()):
            if pending.leader == instance.instance_id:
                del self.rounds[round_id]
                continue
            pending.required.discard(instance.instance_id)
            self._maybe_finish(round_id, pending)

    def live_ids(self, deployment: int) -> list[str]:
        return sorted(self.live[deployment])

    def next_round_id(self) -> int:
        return next(self._round_ids)

    def run_coherence_round(self, leader: FunctionInstance, targets: Iterable[int],
                            invalidation: Invalidation) -> Generator:
        """
        The run_coherence_round function invalidates every cached copy of the payload before the
        caller commits. The leader drops its own copies locally; every other live instance of each
        target deployment receives one INV and answers with an ACK.

        :param leader: FunctionInstance: Instance holding the store locks for the write
        :param targets: Iterable[int]: Deployments responsible for caching the payload
        :param invalidation: Invalidation: Point or prefix payload
        :return: The completed CoherenceRound
        """
        targets = sorted(set(targets))
        round_id = invalidation.round_id
        now = self.kernel.now
        required = {instance_id for deployment in targets for instance_id in self.live[deployment]
                    if instance_id != leader.instance_id}
        pending = CoherenceRound(invalidation = invalidation, leader = leader.instance_id, required = required,
                                 opened_at = now, done = self.kernel.event())
        self.trace.record(now, TraceKind.round_open, round = round_id, leader = leader.instance_id,
                          targets = targets, inv_kind = invalidation.kind.value, ids = list(invalidation.ids),
                          prefix = invalidation.prefix, required = sorted(required))
        if leader.deployment in targets:
            invalidation.apply(leader.cache)
        self.rounds[round_id] = pending
        for deployment in targets:
            recipients = [iid for iid in self.live_ids(deployment) if iid != leader.instance_id]
            if not recipients:
                continue
            self.inv_messages += 1
            self.trace.record(now, TraceKind.inv, round = round_id, deployment = deployment, instances = recipients)
            for instance_id in recipients:
                self.inv_deliveries += 1
                self.kernel.process(self._deliver(pending, self.live[deployment][instance_id]))
        self._maybe_finish(round_id, pending)
        if not pending.done.triggered:
            yield pending.done | self.kernel.sleep(seconds_to_us(self.settings.round_timeout_s))
        if not pending.done.triggered:
            self.rounds.pop(round_id, None)
            missing = len(pending.missing)
            self.trace.record(self.kernel.now, TraceKind.round_timeout, round = round_id, missing = missing)
            logger.warning("t=%d coherence round %d timed out, %d ACKs missing", self.kernel.now, round_id, missing)
            raise RoundTimeout(round_id, missing)
        return pending

    def _deliver(self, pending: CoherenceRound, instance: FunctionInstance) -> Generator:
        round_id = pending.invalidation.round_id
        yield self.kernel.sleep(self.kernel.sample_latency(LatencyKind.tcp, self.rng))
        if not instance.live or self.rounds.get(round_id) is not pending:
            return
        if not self.settings.inject_stale_read:
            pending.invalidation.apply(instance.cache)
        yield self.kernel.sleep(self.kernel.sample_latency(LatencyKind.tcp, self.rng))
        if not instance.live or self.rounds.get(round_id) is not pending:
            return
        pending.acked.add(instance.instance_id)
        self.acks += 1
        self.trace.record(self.kernel.now, TraceKind.ack, round = round_id, instance = instance.instance_id)
        self._maybe_finish(round_id, pending)

    def _maybe_finish(self, round_id: int, pending: CoherenceRound) -> None:
        if pending.done.triggered or pending.missing:
            return
        self.rounds.pop(round_id, None)
        self.rounds_completed += 1
        self.trace.record(self.kernel.now, TraceKind.round_done, round = round_id, acks = len(pending.acked))
        pending.done.succeed(pending)


# ---- writes


@dataclass
class WriteEffect:
    """What a validated mutation changes, where its cached copies live and what to answer."""
    upserts: list[INodeRecord] = field(default_factory = list)
    deletes: list[INodeRecord] = field(default_factory = list)
    targets: set[int] = field(default_factory = set)
    result: INodeRecord | None = None

    @property
    def empty(self) -> bool:
        return not self.upserts and not self.deletes

    def invalidated_ids(self) -> tuple[int, ...]:
        return tuple(sorted({record.id for record in self.upserts + self.deletes}))


Mutation = Callable[[list[PathResolution]], WriteEffect]


def lock_set(resolution: PathResolution) -> set[int]:
    """Parent and target of a resolved path, or the deepest existing ancestor of a missing one."""
    if resolution.found:
        records = resolution.records
        return {records[-1].id} if len(records) == 1 else {records[-2].id, records[-1].id}
    return {resolution.records[-1].id}


def foreign_subtree_lock(resolutions: Iterable[PathResolution], own_op: int | None = None) -> bool:
    return any(record.subtree_lock and record.subtree_op != own_op
               for resolution in resolutions for record in resolution.records)


@dataclass(frozen = True)
class SubOp:
    node: SubtreeNode

    @property
    def depth(self) -> int:
        return self.node.depth


@dataclass
class Batch:
    index: int
    ops: list[SubOp]
    deployment: int | None
    after: list[int] = field(default_factory = list)
    op_id: int | None = None

    @property
    def min_depth(self) -> int:
        return min(op.depth for op in self.ops)

    @property
    def max_depth(self) -> int:
        return max(op.depth for op in self.ops)


def offload_batches(sub_ops: list[SubOp], batch_size: int, leader_deployment: int, n_deployments: int,
                    warm_deployments: Iterable[int] = ()) -> list[Batch]:
    """
    The offload_batches function cuts sub-operations into ``ceil(len/batch_size)`` batches and
    assigns them round-robin to helper deployments other than the leader's, deployments with warm
    instances first. A single batch stays with the leader (``deployment`` None).

    :param sub_ops: list[SubOp]: Per-INode work in execution order
    :param batch_size: int: Maximum sub-operations per batch
    :param leader_deployment: int: Deployment of the leader, never a helper
    :param n_deployments: int: Deployment count
    :param warm_deployments: Iterable[int]: Deployments that currently have warm instances
    :return: Batches in order
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be at least 1, got {batch_size}")
    chunks = [sub_ops[start:start + batch_size] for start in range(0, len(sub_ops), batch_size)]
    if len(chunks) <= 1:
        return [Batch(index = 0, ops = chunk, deployment = None) for chunk in chunks]
    warm = set(warm_deployments)
    others = [(leader_deployment + step) % n_deployments for step in range(1, n_deployments)]
    helpers = [d for d in others if d in warm] + [d for d in others if d not in warm]
    return [Batch(index = i, ops = chunk, deployment = helpers[i % len(helpers)] if helpers else None)
            for i, chunk in enumerate(chunks)]


def order_delete_batches(batches: list[Batch]) -> list[Batch]:
    """Batch j waits for an earlier batch i when i holds an INode deeper than one of j's."""
    for j, later in enumerate(batches):
        later.after = [i for i in range(j) if batches[i].max_depth > later.min_depth]
    return batches


class CoherentWriter:
    """Runs namespace mutations through lock → invalidate → commit, single INode or subtree."""

    def __init__(self, kernel: SimKernel, store: NamespaceStore, coordinator: Coordinator, platform: Platform,
                 settings: CoherenceConfig | None = None):
        self.kernel = kernel
        self.store = store
        self.coordinator = coordinator
        self.platform = platform
        self.settings = settings or CoherenceConfig()
        self.subtree_ops = 0
        self.offloaded_batches = 0

    def _dedup(self, request_id: str | None) -> RpcResponse | None:
        if request_id is None:
            return None
        outcome = self.store.applied_outcome(request_id)
        if outcome is None:
            return None
        return RpcResponse.model_validate_json(outcome).model_copy(update = {"deduplicated": True})

    def _round(self, leader: FunctionInstance, targets: Iterable[int], kind: InvalidationKind,
               ids: tuple[int, ...] = (), prefix: str | None = None) -> Generator:
        targets = frozenset(targets)
        invalidation = Invalidation(round_id = self.coordinator.next_round_id(), kind = kind,
                                    issuer = leader.instance_id, targets = targets, ids = ids, prefix = prefix)
        return (yield from self.coordinator.run_coherence_round(leader, targets, invalidation))

    def write_single_inode(self, leader: FunctionInstance, request_id: str | None, paths: list[str],
                           mutate: Mutation, respond: Callable[[WriteEffect], RpcResponse]) -> Generator:
        """
        The write_single_inode function applies one single-INode mutation: resolve from the store,
        lock parent and target in ascending id order, re-validate under the locks, invalidate every
        cached copy, then commit together with the request's dedup record.

        :param leader: FunctionInstance: Instance executing the write
        :param request_id: str | None: Client request id, recorded with the commit
        :param paths: list[str]: Paths the mutation reads (target, and destination for mv)
        :param mutate: Mutation: Validates the locked resolutions and returns the WriteEffect
        :param respond: Callable: Builds the response from the effect
        :return: RpcResponse
        """
        rng = leader.rng
        for _ in range(self.store.settings.max_write_retries):
            yield self.store.roundtrip(rng)
            duplicate = self._dedup(request_id)
            if duplicate is not None:
                return duplicate
            resolutions = [self.store.resolve_path_batch(path) for path in paths]
            if foreign_subtree_lock(resolutions):
                for resolution in resolutions:
                    if (yield from self.store.wait_for_subtree(resolution)):
                        break
                continue
            wanted = set().union(*(lock_set(resolution) for resolution in resolutions))
            txn = self.store.begin(owner = leader.instance_id, request_id = request_id)
            try:
                yield from self.store.lock_exclusive(txn, wanted)
                yield self.store.roundtrip(rng)
                resolutions = [self.store.resolve_path_batch(path) for path in paths]
                if foreign_subtree_lock(resolutions) or \
                        not set().union(*(lock_set(resolution) for resolution in resolutions)) <= wanted:
                    self.store.abort(txn, reason = "lock set changed before validation")
                    continue
                duplicate = self._dedup(request_id)
                if duplicate is not None:
                    self.store.abort(txn, reason = "already applied")
                    return duplicate
                effect = mutate(resolutions)
                response = respond(effect)
                if not effect.empty:
                    yield from self._round(leader, effect.targets, InvalidationKind.point,
                                           ids = effect.invalidated_ids())
                    txn.barrier_cleared = True
                    for record in effect.upserts:
                        txn.upsert(record)
                    for record in effect.deletes:
                        txn.remove(record)
                    txn.outcome = response.model_dump_json()
                    yield self.store.roundtrip(rng)
                self.store.commit(txn)
                return response
            except BaseException:
                self.store.abort(txn, reason = "write failed")
                raise
        raise TxnAborted(0, f"lock set for {paths} kept changing")

    # ---- subtree protocol

    def run_subtree_op(self, leader: FunctionInstance, request_id: str | None, kind: SubtreeOpKind,
                       root_path: str, dst_path: str | None = None) -> Generator:
        """
        The run_subtree_op function executes a recursive mv or delete. Phase 1 persists a subtree
        lock on the root (overlapping operations are refused), phase 2 quiesces the subtree and
        issues one prefix invalidation to every deployment caching part of it, phase 3 runs the
        per-INode work in batches and finally commits the change to the root. The subtree lock is
        cleared whatever the outcome.

        :param leader: FunctionInstance: Instance that received the request
        :param request_id: str | None: Client request id, recorded with the final commit
        :param kind: SubtreeOpKind: mv or delete
        :param root_path: str: Subtree root
        :param dst_path: str | None: Destination path for mv
        :return: RpcResponse
        """
        rng = leader.rng
        yield self.store.roundtrip(rng)
        duplicate = self._dedup(request_id)
        if duplicate is not None:
            return duplicate
        resolution = self.store.resolve_path_batch(root_path)
        if not resolution.found:
            raise FileNotFound(root_path)
        root = resolution.leaf
        if root.is_root:
            raise InvalidMove(root_path)
        if kind is SubtreeOpKind.mv:
            self._check_move(root_path, dst_path)
        entry = SubtreeOpEntry(op_id = self.store.new_subtree_op_id(), root = root.id, root_path = root_path,
                               kind = kind, started_at = self.kernel.now, owner = leader.instance_id)
        self.store.set_subtree_lock(root.id, entry)
        self.subtree_ops += 1
        try:
            description, deployments = yield from self.store.quiesce_subtree(root.id, entry, rng)
            if kind is SubtreeOpKind.mv:
                dst = self.store.resolve_path_batch(dst_path)
                self._check_destination(dst_path, dst)
            duplicate = self._dedup(request_id)
            if duplicate is not None:
                return duplicate
            yield from self._round(leader, deployments, InvalidationKind.prefix, prefix = root_path)
            root = description.root.record
            if kind is SubtreeOpKind.delete:
                ops = [SubOp(node) for node in sorted(description.nodes[1:], key = lambda n: (-n.depth, n.record.id))]
                batches = order_delete_batches(self._plan(leader, ops))
            else:
                ops = [SubOp(node) for node in sorted(description.nodes[1:], key = lambda n: n.record.id)]
                batches = self._plan(leader, ops)
            for batch in batches:
                batch.op_id = entry.op_id
            yield from self._run_batches(leader, kind, batches)
            return (yield from self._finish_root(leader, request_id, kind, entry, root, dst_path))
        finally:
            self.store.clear_subtree_lock(entry.op_id)

    def _check_move(self, src: str, dst: str | None) -> None:
        if dst is None or dst == "/":
            raise InvalidMove(src)
        if is_prefix(src, dst):
            raise InvalidMove(dst)

    @staticmethod
    def _check_destination(dst_path: str, dst: PathResolution) -> None:
        if dst.found:
            raise AlreadyExists(dst_path)
        if dst.miss_depth < len(components(dst_path)):
            raise FileNotFound(parent_directory(dst_path))
        if not dst.records[-1].is_dir:
            raise NotADirectory(parent_directory(dst_path))

    def _plan(self, leader: FunctionInstance, ops: list[SubOp]) -> list[Batch]:
        warm = [d for d in range(self.platform.n_deployments) if self.platform.warm_instances(d)]
        return offload_batches(ops, self.settings.subtree_batch_size, leader.deployment,
                               self.platform.n_deployments, warm)

    def _run_batches(self, leader: FunctionInstance, kind: SubtreeOpKind, batches: list[Batch]) -> Generator:
        processes: list[simpy.Process] = []
        for batch in batches:
            processes.append(self.kernel.process(self._batch(leader, kind, batch, [processes[i] for i in batch.after])))
        if processes:
            outcome = yield self.kernel.all_of(processes)
            if not all(outcome[process] for process in processes):
                raise TxnAborted(0, "a subtree batch failed")

    def _batch(self, leader: FunctionInstance, kind: SubtreeOpKind, batch: Batch,
               after: list[simpy.Process]) -> Generator:
        if after:
            finished = yield self.kernel.all_of(after)
            if not all(finished[process] for process in after):
                return False
        if batch.deployment is None:
            executor, slot_held = leader, False
        else:
            executor, slot_held = yield from self._helper(batch.deployment, leader)
            self.offloaded_batches += 1
        try:
            done = yield self.platform.serve(executor, self._execute(executor, kind, batch))
        finally:
            if slot_held:
                self.platform.release_slot(executor)
        return bool(done)

    def _helper(self, deployment: int, leader: FunctionInstance) -> Generator:
        warm = [instance for instance in self.platform.warm_instances(deployment)
                if instance.concurrency_used < instance.concurrency_limit]
        if warm:
            helper = min(warm, key = lambda instance: (instance.in_flight, instance.index))
            yield self.kernel.sleep(self.kernel.sample_latency(LatencyKind.tcp, leader.rng))
            return helper, False
        helper = yield from self.platform.invoke_http(deployment, leader.rng)
        return helper, True

    def _execute(self, executor: FunctionInstance, kind: SubtreeOpKind, batch: Batch) -> Generator:
        yield from self.platform.cpu_burst(executor)
        txn = self.store.begin(owner = executor.instance_id)
        txn.subtree_op = batch.op_id
        try:
            yield from self.store.lock_exclusive(txn, [op.node.record.id for op in batch.ops])
            yield self.store.roundtrip(executor.rng)
            now = self.kernel.now
            for op in batch.ops:
                current = self.store.get(op.node.record.id)
                if current is None:
                    continue
                if kind is SubtreeOpKind.delete:
                    txn.remove(current)
                else:
                    txn.upsert(current.model_copy(update = {"version": current.version + 1, "mtime": now}))
            txn.barrier_cleared = True
            self.store.commit(txn)
            return True
        except StoreError as err:
            self.store.abort(txn, reason = "subtree batch failed")
            logger.info("t=%d subtree batch %d on %s failed: %s", self.kernel.now, batch.index,
                        executor.instance_id, err)
            return False

    def _finish_root(self, leader: FunctionInstance, request_id: str | None, kind: SubtreeOpKind,
                     entry: SubtreeOpEntry, root: INodeRecord, dst_path: str | None) -> Generator:
        rng = leader.rng
        current = self.store.get(root.id)
        if current is None:
            raise TxnAborted(0, f"subtree root {entry.root_path} vanished")
        lock_ids = {current.id, current.parent}
        dst_parent = None
        if kind is SubtreeOpKind.mv:
            dst = self.store.resolve_path_batch(dst_path)
            self._check_destination(dst_path, dst)
            if foreign_subtree_lock([dst], own_op = entry.op_id):
                raise TxnAborted(0, f"destination {dst_path} is inside another subtree operation")
            dst_parent = dst.records[-1]
            lock_ids.add(dst_parent.id)
        txn = self.store.begin(owner = leader.instance_id, request_id = request_id)
        txn.subtree_op = entry.op_id
        try:
            yield from self.store.lock_exclusive(txn, lock_ids)
            yield self.store.roundtrip(rng)
            now = self.kernel.now
            current = self.store.get(root.id)
            if kind is SubtreeOpKind.delete:
                if self.store.has_children(current.id):
                    raise TxnAborted(txn.txn_id, f"{entry.root_path} gained entries during the delete")
                txn.remove(current)
                written = current.model_copy(update = {"version": current.version + 1})
            else:
                written = current.model_copy(update = {"parent": dst_parent.id, "name": basename(dst_path),
                                                       "version": current.version + 1, "mtime": now,
                                                       "subtree_lock": False, "subtree_op": None})
                txn.upsert(written)
            response = RpcResponse(request_id = request_id or "", inode = written.id, version = written.version,
                                   writes = [(written.id, written.version)], served_by = leader.instance_id)
            txn.barrier_cleared = True
            txn.outcome = response.model_dump_json()
            self.store.commit(txn)
            return response
        except BaseException:
            self.store.abort(txn, reason = "subtree root commit failed")
            raise
