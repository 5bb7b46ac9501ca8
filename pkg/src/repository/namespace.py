import enum
import itertools
import json
import logging
from collections import deque
from collections.abc import Generator, Iterable
from dataclasses import dataclass, field

import numpy as np
from sqlalchemy import delete, insert, select, update

from src.database.db import StoreSessionManager
from src.entity.models import ROOT_ID, AppliedRequest, INode, INodeKind, SubtreeOp
from src.exceptions import CommitBarrierViolation, LockOrderViolation, StoreError, SubtreeConflict, TxnAborted
from src.schemas.inode import INodeRecord, PathResolution, SubtreeDescription, SubtreeNode, SubtreeOpEntry, \
    root_record
from src.schemas.scenario import StoreConfig, seconds_to_us
from src.services.kernel import LatencyKind, SimKernel
from src.services.partitioning import components, deployments_for_subtree, is_prefix, join
from src.services.trace import ProtocolTrace, TraceKind

logger = logging.getLogger(__name__)


class TxnState(str, enum.Enum):
    open = "open"
    committed = "committed"
    aborted = "aborted"


class LockMode(str, enum.Enum):
    shared = "shared"
    exclusive = "exclusive"


@dataclass(frozen = True)
class PendingWrite:
    record: INodeRecord
    deleted: bool = False


@dataclass(eq = False)
class StoreTxn:
    txn_id: int
    owner: str
    request_id: str | None = None
    locked_ids: dict[int, LockMode] = field(default_factory = dict)
    writes: dict[int, PendingWrite] = field(default_factory = dict)
    state: TxnState = TxnState.open
    barrier_cleared: bool = False
    outcome: str | None = None
    subtree_op: int | None = None

    def upsert(self, record: INodeRecord) -> None:
        self.writes[record.id] = PendingWrite(record)

    def remove(self, record: INodeRecord) -> None:
        self.writes[record.id] = PendingWrite(record.model_copy(update = {"version": record.version + 1}),
                                              deleted = True)


@dataclass(eq = False)
class _LockEntry:
    mode: LockMode | None = None
    holders: set[int] = field(default_factory = set)
    waiters: deque = field(default_factory = deque)
    released: list = field(default_factory = list)


class NamespaceStore:
    """
    Persistent metadata store: INode table with single-shot ACID transactions, shared/exclusive
    per-INode locks acquired in ascending id order, subtree-lock flags and the active subtree
    operations table. Committed state lives in SQLAlchemy tables; lock state is in memory and
    waiting is expressed as simulation events.
    """

    def __init__(self, kernel: SimKernel, n_deployments: int, settings: StoreConfig | None = None,
                 trace: ProtocolTrace | None = None, sessions: StoreSessionManager | None = None):
        self.kernel = kernel
        self.n_deployments = n_deployments
        self.settings = settings or StoreConfig()
        self.trace = trace or ProtocolTrace()
        self.sessions = sessions or StoreSessionManager()
        self.rng = kernel.rng("store")
        self.lock_wait_timeout = seconds_to_us(self.settings.lock_wait_timeout_s)
        self._locks: dict[int, _LockEntry] = {}
        self._open: dict[int, StoreTxn] = {}
        self._txn_ids = itertools.count(1)
        self._op_ids = itertools.count(1)
        self._next_inode = ROOT_ID + 1
        self._subtree_ops: dict[int, SubtreeOpEntry] = {}
        self._subtree_cleared: dict[int, object] = {}
        self.commits = 0
        self.committed_writes = 0
        root = root_record()
        with self.sessions.session() as session, session.begin():
            session.execute(insert(INode), [_row(root)])
        self.trace.record(self.kernel.now, TraceKind.commit, txn = 0, owner = "bootstrap", request = None,
                          writes = [_trace_write(PendingWrite(root))])

    # ---- committed-state queries

    def allocate_id(self) -> int:
        inode_id = self._next_inode
        self._next_inode += 1
        return inode_id

    def get(self, inode_id: int) -> INodeRecord | None:
        with self.sessions.session() as session:
            row = session.get(INode, inode_id)
            return INodeRecord.from_row(row) if row is not None else None

    def resolve_path_batch(self, path: str, start: list[INodeRecord] | None = None) -> PathResolution:
        """
        The resolve_path_batch function resolves every component of ``path`` in one batch, the way a
        single query with an INode hint would. When ``start`` holds already known records for a prefix
        of the path only the missing suffix is looked up; hints that no longer match the committed rows
        are discarded and the whole path is resolved again.

        :param path: str: Normalized absolute path
        :param start: list[INodeRecord] | None: Known records root→k for the first k components
        :return: PathResolution with records root→leaf, or the longest prefix and the miss depth
        """
        parts = components(path)
        records = list(start[:len(parts) + 1]) if start else []
        with self.sessions.session() as session:
            for hint in records:
                row = session.get(INode, hint.id)
                if row is None or (row.parent_id, row.name, row.version) != (hint.parent, hint.name, hint.version):
                    records = []
                    break
            if not records:
                records.append(INodeRecord.from_row(session.get(INode, ROOT_ID)))
            for depth in range(len(records), len(parts) + 1):
                parent = records[-1]
                if not parent.is_dir:
                    return PathResolution(path = path, records = records, miss_depth = depth)
                row = session.execute(
                    select(INode).filter_by(parent_id = parent.id, name = parts[depth - 1])
                ).scalar_one_or_none()
                if row is None:
                    return PathResolution(path = path, records = records, miss_depth = depth)
                records.append(INodeRecord.from_row(row))
        return PathResolution(path = path, records = records)

    def list_children(self, dir_id: int) -> list[INodeRecord]:
        with self.sessions.session() as session:
            rows = session.execute(
                select(INode).filter_by(parent_id = dir_id).where(INode.id != ROOT_ID).order_by(INode.name)
            ).scalars().all()
            return [INodeRecord.from_row(row) for row in rows]

    def has_children(self, dir_id: int) -> bool:
        with self.sessions.session() as session:
            row = session.execute(
                select(INode.id).filter_by(parent_id = dir_id).where(INode.id != ROOT_ID).limit(1)
            ).first()
            return row is not None

    def path_of(self, inode_id: int) -> str | None:
        names = []
        with self.sessions.session() as session:
            current = session.get(INode, inode_id)
            while current is not None and current.id != ROOT_ID:
                names.append(current.name)
                current = session.get(INode, current.parent_id)
            if current is None:
                return None
        return "/" + "/".join(reversed(names)) if names else "/"

    def ancestors(self, inode_id: int) -> list[int]:
        """Ids from ``inode_id`` up to and including the root."""
        chain = []
        with self.sessions.session() as session:
            current = session.get(INode, inode_id)
            while current is not None:
                chain.append(current.id)
                if current.id == ROOT_ID:
                    break
                current = session.get(INode, current.parent_id)
        return chain

    def applied_outcome(self, request_id: str) -> str | None:
        with self.sessions.session() as session:
            row = session.get(AppliedRequest, request_id)
            return row.outcome if row is not None else None

    def count(self) -> int:
        with self.sessions.session() as session:
            return len(session.execute(select(INode.id)).all())

    def snapshot(self) -> list[INodeRecord]:
        with self.sessions.session() as session:
            rows = session.execute(select(INode).order_by(INode.id)).scalars().all()
            return [INodeRecord.from_row(row) for row in rows]

    def snapshot_lines(self) -> list[str]:
        return [record.model_dump_json() for record in self.snapshot()]

    # ---- simulated access

    def roundtrip(self, rng: np.random.Generator | None = None):
        return self.kernel.sleep(self.kernel.sample_latency(LatencyKind.store, rng or self.rng))

    def blocked_by(self, resolution: PathResolution, ignore_op: int | None = None):
        """Event to wait on when a resolved path is write-locked or inside a foreign subtree lock."""
        for record in resolution.records:
            if record.subtree_lock and record.subtree_op is not None and record.subtree_op != ignore_op:
                cleared = self._subtree_cleared.get(record.subtree_op)
                if cleared is not None:
                    return cleared
        for record in resolution.records:
            entry = self._locks.get(record.id)
            if entry is not None and entry.mode is LockMode.exclusive and entry.holders:
                waiter = self.kernel.event()
                entry.released.append(waiter)
                return waiter
        return None

    def read_path(self, path: str, start: list[INodeRecord] | None = None,
                  rng: np.random.Generator | None = None) -> Generator:
        """
        Simulated shared-locked read: after one store round trip the path is resolved and returned at
        a single instant at which no other transaction holds an exclusive lock on any component and no
        component is inside a foreign subtree lock. Blocked reads wait for the release and retry.
        """
        deadline = self.kernel.now + self.lock_wait_timeout
        while True:
            yield self.roundtrip(rng)
            resolution = self.resolve_path_batch(path, start)
            blocker = self.blocked_by(resolution)
            if blocker is None:
                return resolution
            remaining = deadline - self.kernel.now
            if remaining <= 0:
                raise TxnAborted(0, f"read of {path} waited past the lock timeout")
            yield blocker | self.kernel.sleep(remaining)

    def wait_for_subtree(self, resolution: PathResolution, ignore_op: int | None = None) -> Generator:
        deadline = self.kernel.now + self.lock_wait_timeout
        for record in resolution.records:
            if record.subtree_lock and record.subtree_op is not None and record.subtree_op != ignore_op:
                cleared = self._subtree_cleared.get(record.subtree_op)
                if cleared is None:
                    continue
                remaining = deadline - self.kernel.now
                if remaining <= 0:
                    raise TxnAborted(0, f"{resolution.path} stayed subtree-locked past the lock timeout")
                yield cleared | self.kernel.sleep(remaining)
                return True
        return False

    # ---- transactions

    def begin(self, owner: str, request_id: str | None = None) -> StoreTxn:
        txn = StoreTxn(txn_id = next(self._txn_ids), owner = owner, request_id = request_id)
        self._open[txn.txn_id] = txn
        return txn

    def lock_exclusive(self, txn: StoreTxn, ids: Iterable[int]) -> Generator:
        yield from self._lock(txn, ids, LockMode.exclusive)

    def lock_shared(self, txn: StoreTxn, ids: Iterable[int]) -> Generator:
        yield from self._lock(txn, ids, LockMode.shared)

    def _lock(self, txn: StoreTxn, ids: Iterable[int], mode: LockMode) -> Generator:
        self._check_open(txn)
        held_max = max(txn.locked_ids, default = 0)
        for inode_id in sorted(set(ids)):
            held = txn.locked_ids.get(inode_id)
            if held is LockMode.exclusive or (held is not None and mode is LockMode.shared):
                continue
            if held is not None:
                raise LockOrderViolation(f"txn {txn.txn_id} cannot upgrade its shared lock on {inode_id}")
            if inode_id < held_max:
                raise LockOrderViolation(
                    f"txn {txn.txn_id} requested {inode_id} after already holding {held_max}")
            entry = self._locks.setdefault(inode_id, _LockEntry())
            if self._grantable(entry, mode):
                self._grant(entry, txn, inode_id, mode)
            else:
                yield from self._wait_for_lock(entry, txn, inode_id, mode)
            held_max = max(held_max, inode_id)

    def _wait_for_lock(self, entry: _LockEntry, txn: StoreTxn, inode_id: int, mode: LockMode) -> Generator:
        granted = self.kernel.event()
        waiter = (txn, mode, granted)
        entry.waiters.append(waiter)
        try:
            yield granted | self.kernel.sleep(self.lock_wait_timeout)
        finally:
            if not granted.triggered and waiter in entry.waiters:
                entry.waiters.remove(waiter)
        if not granted.triggered:
            self.abort(txn, reason = f"lock wait on {inode_id} timed out")
            raise TxnAborted(txn.txn_id, f"lock wait on {inode_id} timed out")
        if granted.value is False or txn.state is not TxnState.open:
            raise TxnAborted(txn.txn_id, "aborted while waiting for a lock")

    @staticmethod
    def _grantable(entry: _LockEntry, mode: LockMode) -> bool:
        if not entry.holders:
            return not entry.waiters
        return mode is LockMode.shared and entry.mode is LockMode.shared and not entry.waiters

    @staticmethod
    def _grant(entry: _LockEntry, txn: StoreTxn, inode_id: int, mode: LockMode) -> None:
        entry.mode = mode
        entry.holders.add(txn.txn_id)
        txn.locked_ids[inode_id] = mode

    def _release(self, txn: StoreTxn) -> None:
        for inode_id in list(txn.locked_ids):
            entry = self._locks.get(inode_id)
            if entry is None:
                continue
            entry.holders.discard(txn.txn_id)
            if entry.holders:
                continue
            entry.mode = None
            for released in entry.released:
                if not released.triggered:
                    released.succeed()
            entry.released.clear()
            while entry.waiters:
                next_txn, mode, granted = entry.waiters[0]
                if entry.holders and not (mode is LockMode.shared and entry.mode is LockMode.shared):
                    break
                entry.waiters.popleft()
                if next_txn.state is not TxnState.open:
                    granted.succeed(False)
                    continue
                self._grant(entry, next_txn, inode_id, mode)
                granted.succeed(True)
                if mode is LockMode.exclusive:
                    break
            if not entry.holders and not entry.waiters:
                del self._locks[inode_id]
        txn.locked_ids.clear()

    def _check_open(self, txn: StoreTxn) -> None:
        if txn.state is not TxnState.open:
            raise TxnAborted(txn.txn_id, f"transaction is {txn.state.value}")

    def commit(self, txn: StoreTxn) -> None:
        """
        The commit function atomically applies a transaction's writes and releases its locks.
        Writes are refused unless the coherence round guarding them has completed.

        :param txn: StoreTxn: An open transaction
        :return: None
        """
        self._check_open(txn)
        if txn.writes and not txn.barrier_cleared:
            raise CommitBarrierViolation(f"txn {txn.txn_id} tried to commit before its coherence round completed")
        now = self.kernel.now
        if txn.writes or txn.outcome is not None:
            with self.sessions.session() as session, session.begin():
                for pending in txn.writes.values():
                    record = pending.record
                    if pending.deleted:
                        session.execute(delete(INode).where(INode.id == record.id))
                    elif session.get(INode, record.id) is None:
                        session.execute(insert(INode), [_row(record)])
                    else:
                        session.execute(update(INode).where(INode.id == record.id).values(**_values(record)))
                if txn.request_id is not None and txn.outcome is not None:
                    session.merge(AppliedRequest(request_id = txn.request_id, outcome = txn.outcome,
                                                 committed_at = now))
            self.trace.record(now, TraceKind.commit, txn = txn.txn_id, owner = txn.owner, request = txn.request_id,
                              op = txn.subtree_op,
                              writes = [_trace_write(pending) for pending in txn.writes.values()])
            self.commits += 1
            self.committed_writes += len(txn.writes)
        txn.state = TxnState.committed
        self._release(txn)
        self._open.pop(txn.txn_id, None)

    def abort(self, txn: StoreTxn, reason: str = "aborted") -> None:
        if txn.state is not TxnState.open:
            return
        txn.state = TxnState.aborted
        txn.writes.clear()
        for entry in self._locks.values():
            for waiter in list(entry.waiters):
                if waiter[0] is txn:
                    entry.waiters.remove(waiter)
                    waiter[2].succeed(False)
        self._release(txn)
        self._open.pop(txn.txn_id, None)
        self.trace.record(self.kernel.now, TraceKind.abort, txn = txn.txn_id, owner = txn.owner,
                          request = txn.request_id, reason = reason)
        logger.debug("t=%d txn %d aborted: %s", self.kernel.now, txn.txn_id, reason)

    def abort_owned_by(self, owner: str) -> int:
        """Abort every open transaction and drop every subtree operation owned by a crashed instance."""
        victims = [txn for txn in self._open.values() if txn.owner == owner]
        for txn in victims:
            self.abort(txn, reason = f"owner {owner} terminated")
        for entry in [op for op in self._subtree_ops.values() if op.owner == owner]:
            self.clear_subtree_lock(entry.op_id)
        return len(victims)

    def open_transactions(self) -> list[StoreTxn]:
        return list(self._open.values())

    # ---- subtree operations

    def new_subtree_op_id(self) -> int:
        return next(self._op_ids)

    def live_subtree_ops(self) -> list[SubtreeOpEntry]:
        return list(self._subtree_ops.values())

    def set_subtree_lock(self, root: int, op: SubtreeOpEntry) -> None:
        """
        The set_subtree_lock function records a subtree operation and flags its root, refusing when
        a live operation's subtree overlaps (ancestor, descendant or same root).

        :param root: int: Subtree root INode id
        :param op: SubtreeOpEntry: Entry to persist in the subtree operations table
        :return: None
        """
        mine = set(self.ancestors(root))
        if not mine:
            raise StoreError(f"subtree root {root} does not exist")
        for live in self._subtree_ops.values():
            if live.root in mine or root in self.ancestors(live.root) or is_prefix(live.root_path, op.root_path) \
                    or is_prefix(op.root_path, live.root_path):
                raise SubtreeConflict(op.root_path, live.op_id)
        with self.sessions.session() as session, session.begin():
            session.execute(update(INode).where(INode.id == root).values(subtree_locked = True,
                                                                          subtree_op_id = op.op_id))
            session.add(SubtreeOp(op_id = op.op_id, root_id = root, root_path = op.root_path, kind = op.kind,
                                  started_at = op.started_at, owner = op.owner))
        self._subtree_ops[op.op_id] = op
        self._subtree_cleared[op.op_id] = self.kernel.event()
        self.trace.record(self.kernel.now, TraceKind.subtree_lock, op = op.op_id, root = root, path = op.root_path,
                          op_kind = op.kind.value, owner = op.owner)

    def clear_subtree_lock(self, op_id: int) -> None:
        op = self._subtree_ops.pop(op_id, None)
        if op is None:
            return
        with self.sessions.session() as session, session.begin():
            session.execute(update(INode).where(INode.subtree_op_id == op_id).values(subtree_locked = False,
                                                                                      subtree_op_id = None))
            session.execute(delete(SubtreeOp).where(SubtreeOp.op_id == op_id))
        cleared = self._subtree_cleared.pop(op_id)
        if not cleared.triggered:
            cleared.succeed()
        self.trace.record(self.kernel.now, TraceKind.subtree_clear, op = op_id, root = op.root, path = op.root_path)

    def describe_subtree(self, root_path: str, root: INodeRecord) -> SubtreeDescription:
        nodes = [SubtreeNode(record = root, path = root_path, depth = 0)]
        frontier = [nodes[0]] if root.is_dir else []
        with self.sessions.session() as session:
            while frontier:
                by_id = {node.record.id: node for node in frontier}
                rows = session.execute(
                    select(INode).where(INode.parent_id.in_(list(by_id))).where(INode.id != ROOT_ID)
                    .order_by(INode.parent_id, INode.name)
                ).scalars().all()
                frontier = []
                for row in rows:
                    parent = by_id[row.parent_id]
                    node = SubtreeNode(record = INodeRecord.from_row(row), path = join(parent.path, row.name),
                                       depth = parent.depth + 1)
                    nodes.append(node)
                    if row.kind is INodeKind.directory:
                        frontier.append(node)
        return SubtreeDescription(root_path = root_path, nodes = nodes)

    def quiesce_subtree(self, root: int, op: SubtreeOpEntry,
                        rng: np.random.Generator | None = None) -> Generator:
        """
        The quiesce_subtree function drains conflicting writers out of a subtree whose root already
        carries this operation's subtree lock: it takes and releases an exclusive lock on every INode
        in ascending id order, then re-reads the now stable structure.

        :param root: int: Subtree root id, flagged by ``op``
        :param op: SubtreeOpEntry: The owning subtree operation
        :return: (SubtreeDescription, set of deployment ids caching any INode in it)
        """
        if op.op_id not in self._subtree_ops:
            raise StoreError(f"subtree operation {op.op_id} does not hold a subtree lock")
        record = self.get(root)
        if record is None:
            raise StoreError(f"subtree root {root} vanished")
        yield self.roundtrip(rng)
        draft = self.describe_subtree(op.root_path, record)
        sweep = self.begin(owner = op.owner)
        try:
            for node in sorted(draft.nodes, key = lambda n: n.record.id):
                yield from self.lock_exclusive(sweep, [node.record.id])
                self._release(sweep)
        finally:
            if sweep.state is TxnState.open:
                sweep.state = TxnState.committed
                self._release(sweep)
                self._open.pop(sweep.txn_id, None)
        yield self.roundtrip(rng)
        description = self.describe_subtree(op.root_path, self.get(root))
        return description, deployments_for_subtree(description, self.n_deployments)

    # ---- bulk population

    def populate(self, records: list[INodeRecord]) -> None:
        """Load a pre-built namespace before the measured window; recorded as one commit at t=now."""
        if not records:
            return
        with self.sessions.session() as session, session.begin():
            session.execute(insert(INode), [_row(record) for record in records])
        self._next_inode = max(self._next_inode, max(record.id for record in records) + 1)
        self.trace.record(self.kernel.now, TraceKind.commit, txn = 0, owner = "populate", request = None,
                          writes = [_trace_write(PendingWrite(record)) for record in records])


def _row(record: INodeRecord) -> dict:
    return {"id": record.id, **_values(record)}


def _values(record: INodeRecord) -> dict:
    return {
        "parent_id": record.parent,
        "name": record.name,
        "kind": record.kind,
        "perms": record.perms,
        "mtime": record.mtime,
        "version": record.version,
        "subtree_locked": record.subtree_lock,
        "subtree_op_id": record.subtree_op,
    }


def _trace_write(pending: PendingWrite) -> dict:
    record = pending.record
    return {"id": record.id, "parent": record.parent, "name": record.name, "kind": record.kind.value,
            "perms": record.perms, "version": record.version, "deleted": pending.deleted}


def outcome_json(status: str, records: list[INodeRecord] | None = None) -> str:
    return json.dumps({"status": status, "records": [(r.id, r.version) for r in records or []]},
                      separators = (",", ":"))
