import unittest

from src.entity.models import INodeKind, SubtreeOpKind
from src.exceptions import CommitBarrierViolation, LockOrderViolation, SubtreeConflict, TxnAborted
from src.repository.namespace import NamespaceStore, TxnState, outcome_json
from src.schemas.inode import INodeRecord, SubtreeOpEntry
from src.schemas.scenario import LatencyConfig, LatencyRange, StoreConfig
from src.services.kernel import SimKernel
from src.services.oracle import run_verification
from src.services.trace import TraceKind

STORE_US = 1_000


def directory(inode_id: int, parent: int, name: str) -> INodeRecord:
    return INodeRecord(id = inode_id, parent = parent, name = name, kind = INodeKind.directory)


def file(inode_id: int, parent: int, name: str) -> INodeRecord:
    return INodeRecord(id = inode_id, parent = parent, name = name, kind = INodeKind.file)


class StoreTestCase(unittest.TestCase):

    def setUp(self) -> None:
        latency = LatencyConfig(store = LatencyRange(min_us = STORE_US, max_us = STORE_US))
        self.kernel = SimKernel(seed = 1, latency = latency)
        self.store = NamespaceStore(self.kernel, 4, StoreConfig(lock_wait_timeout_s = 1.0))
        # /a (2), /a/b (3), /a/b/f (4), /a/g (5), /c (6)
        self.store.populate([directory(2, 1, "a"), directory(3, 2, "b"), file(4, 3, "f"), file(5, 2, "g"),
                             directory(6, 1, "c")])

    def run_process(self, generator, until: int = 10_000_000):
        process = self.kernel.process(generator)
        self.kernel.run_until(self.kernel.now + until)
        return process.value


class TestQueries(StoreTestCase):

    def test_root_exists(self):
        resolution = self.store.resolve_path_batch("/")
        self.assertTrue(resolution.found)
        self.assertTrue(resolution.leaf.is_root)

    def test_resolve_full_path(self):
        resolution = self.store.resolve_path_batch("/a/b/f")
        self.assertTrue(resolution.found)
        self.assertEqual([r.id for r in resolution.records], [1, 2, 3, 4])

    def test_resolve_miss_depth(self):
        resolution = self.store.resolve_path_batch("/a/x/y")
        self.assertFalse(resolution.found)
        self.assertEqual(resolution.miss_depth, 2)
        self.assertEqual([r.id for r in resolution.records], [1, 2])

    def test_resolve_through_file(self):
        resolution = self.store.resolve_path_batch("/a/g/h")
        self.assertEqual(resolution.miss_depth, 3)

    def test_stale_hint_is_discarded(self):
        stale = [self.store.get(1), self.store.get(2).model_copy(update = {"version": 9})]
        resolution = self.store.resolve_path_batch("/a/b", stale)
        self.assertTrue(resolution.found)
        self.assertEqual(resolution.records[1].version, 1)

    def test_listing_and_paths(self):
        self.assertEqual([r.name for r in self.store.list_children(2)], ["b", "g"])
        self.assertTrue(self.store.has_children(3))
        self.assertFalse(self.store.has_children(6))
        self.assertEqual(self.store.path_of(4), "/a/b/f")
        self.assertEqual(self.store.path_of(1), "/")
        self.assertIsNone(self.store.path_of(99))
        self.assertEqual(self.store.ancestors(4), [4, 3, 2, 1])

    def test_root_insert_is_traced(self):
        commit = self.store.trace.of_kind(TraceKind.commit)[0]
        self.assertEqual((commit.t, commit.data["owner"], commit.data["request"]), (0, "bootstrap", None))
        self.assertEqual([(w["id"], w["version"], w["kind"]) for w in commit.data["writes"]], [(1, 1, "directory")])

    def test_fresh_root_listing_verifies(self):
        store = NamespaceStore(SimKernel(seed = 1), 2)
        requests = [{"request_id": "c0-1", "client_id": 0, "op": "ls", "status": "ok", "inode": 1, "version": 1,
                     "invoked_at": 10, "completed_at": 20}]
        snapshot = [record.model_dump(mode = "json") for record in store.snapshot()]
        report = run_verification(requests, store.trace, snapshot)
        self.assertTrue(report.passed, report.failed())

    def test_populate_is_traced(self):
        commit = self.store.trace.of_kind(TraceKind.commit)[1]
        self.assertEqual(commit.data["owner"], "populate")
        self.assertEqual(len(commit.data["writes"]), 5)
        self.assertEqual(self.store.count(), 6)
        self.assertEqual(self.store.allocate_id(), 7)


class TestTransactions(StoreTestCase):

    def test_commit_requires_barrier(self):
        txn = self.store.begin("nn-0", "c1-1")
        txn.upsert(file(7, 6, "new"))
        with self.assertRaises(CommitBarrierViolation):
            self.store.commit(txn)

    def test_commit_applies_writes(self):
        def body():
            txn = self.store.begin("nn-0", "c1-1")
            yield from self.store.lock_exclusive(txn, [6])
            txn.upsert(file(7, 6, "new"))
            txn.outcome = outcome_json("ok")
            txn.barrier_cleared = True
            self.store.commit(txn)
            return txn

        txn = self.run_process(body())
        self.assertIs(txn.state, TxnState.committed)
        self.assertEqual(self.store.path_of(7), "/c/new")
        self.assertEqual(self.store.applied_outcome("c1-1"), outcome_json("ok"))
        commit = self.store.trace.of_kind(TraceKind.commit)[-1]
        self.assertEqual(commit.data["request"], "c1-1")
        self.assertEqual(commit.data["writes"][0]["name"], "new")
        self.assertEqual(self.store.commits, 1)

    def test_remove_bumps_version(self):
        txn = self.store.begin("nn-0")
        txn.remove(self.store.get(5))
        txn.barrier_cleared = True
        self.store.commit(txn)
        self.assertIsNone(self.store.get(5))
        write = self.store.trace.of_kind(TraceKind.commit)[-1].data["writes"][0]
        self.assertTrue(write["deleted"])
        self.assertEqual(write["version"], 2)

    def test_lock_order_violation(self):
        errors = []

        def body():
            txn = self.store.begin("nn-0")
            yield from self.store.lock_exclusive(txn, [5])
            try:
                yield from self.store.lock_exclusive(txn, [3])
            except LockOrderViolation as err:
                errors.append(err)

        self.run_process(body())
        self.assertEqual(len(errors), 1)

    def test_exclusive_lock_blocks_until_commit(self):
        granted = []

        def holder():
            txn = self.store.begin("nn-0")
            yield from self.store.lock_exclusive(txn, [2])
            yield self.kernel.sleep(100)
            self.store.commit(txn)

        def waiter():
            yield self.kernel.sleep(10)
            txn = self.store.begin("nn-1")
            yield from self.store.lock_exclusive(txn, [2])
            granted.append(self.kernel.now)
            self.store.commit(txn)

        self.kernel.process(holder())
        self.kernel.process(waiter())
        self.kernel.run_until(1_000)
        self.assertEqual(granted, [100])

    def test_shared_locks_coexist(self):
        granted = []

        def reader(name):
            txn = self.store.begin(name)
            yield from self.store.lock_shared(txn, [2, 3])
            granted.append((name, self.kernel.now))
            yield self.kernel.sleep(50)
            self.store.commit(txn)

        self.kernel.process(reader("nn-0"))
        self.kernel.process(reader("nn-1"))
        self.kernel.run_until(1_000)
        self.assertEqual(granted, [("nn-0", 0), ("nn-1", 0)])

    def test_lock_wait_times_out(self):
        errors = []

        def holder():
            txn = self.store.begin("nn-0")
            yield from self.store.lock_exclusive(txn, [2])
            yield self.kernel.sleep(10_000_000)

        def waiter():
            txn = self.store.begin("nn-1")
            try:
                yield from self.store.lock_exclusive(txn, [2])
            except TxnAborted as err:
                errors.append((self.kernel.now, txn.state))

        self.kernel.process(holder())
        self.kernel.process(waiter())
        self.kernel.run_until(2_000_000)
        self.assertEqual(errors, [(1_000_000, TxnState.aborted)])

    def test_read_waits_for_exclusive_holder(self):
        done = []

        def holder():
            txn = self.store.begin("nn-0")
            yield from self.store.lock_exclusive(txn, [3])
            yield self.kernel.sleep(5_000)
            self.store.commit(txn)

        def reader():
            resolution = yield from self.store.read_path("/a/b/f")
            done.append((self.kernel.now, resolution.found))

        self.kernel.process(holder())
        self.kernel.process(reader())
        self.kernel.run_until(100_000)
        self.assertEqual(len(done), 1)
        self.assertGreaterEqual(done[0][0], 5_000 + STORE_US)
        self.assertTrue(done[0][1])

    def test_abort_owned_by(self):
        def body():
            txn = self.store.begin("nn-7")
            yield from self.store.lock_exclusive(txn, [2])
            return txn

        txn = self.run_process(body(), until = 10)
        self.assertEqual(self.store.abort_owned_by("nn-7"), 1)
        self.assertIs(txn.state, TxnState.aborted)
        self.assertEqual(self.store.open_transactions(), [])
        self.assertEqual(self.store.trace.of_kind(TraceKind.abort)[0].data["owner"], "nn-7")


class TestSubtreeOperations(StoreTestCase):

    def entry(self, root_path: str, owner: str = "nn-0") -> SubtreeOpEntry:
        root = self.store.resolve_path_batch(root_path).leaf.id
        return SubtreeOpEntry(op_id = self.store.new_subtree_op_id(), root = root, root_path = root_path,
                              kind = SubtreeOpKind.mv, started_at = self.kernel.now, owner = owner)

    def test_overlapping_subtrees_conflict(self):
        first = self.entry("/a")
        self.store.set_subtree_lock(2, first)
        with self.assertRaises(SubtreeConflict):
            self.store.set_subtree_lock(3, self.entry("/a/b"))
        self.store.set_subtree_lock(6, self.entry("/c"))
        self.assertTrue(self.store.get(2).subtree_lock)
        self.store.clear_subtree_lock(first.op_id)
        self.assertFalse(self.store.get(2).subtree_lock)
        self.store.set_subtree_lock(3, self.entry("/a/b"))
        kinds = [event.kind for event in self.store.trace.events if event.kind is not TraceKind.commit]
        self.assertEqual(kinds, [TraceKind.subtree_lock, TraceKind.subtree_lock, TraceKind.subtree_clear,
                                 TraceKind.subtree_lock])
        lock = self.store.trace.of_kind(TraceKind.subtree_lock)[0]
        self.assertEqual((lock.kind, lock.data["op_kind"], lock.data["path"]), (TraceKind.subtree_lock, "mv", "/a"))
        self.assertIn('"kind":"subtree-lock"', lock.to_line())

    def test_crash_clears_subtree_lock(self):
        op = self.entry("/a", owner = "nn-3")
        self.store.set_subtree_lock(2, op)
        self.store.abort_owned_by("nn-3")
        self.assertEqual(self.store.live_subtree_ops(), [])
        self.assertFalse(self.store.get(2).subtree_lock)

    def test_describe_subtree(self):
        description = self.store.describe_subtree("/a", self.store.get(2))
        self.assertEqual(description.paths(), ["/a", "/a/b", "/a/g", "/a/b/f"])
        self.assertEqual([node.depth for node in description.nodes], [0, 1, 1, 2])

    def test_quiesce_subtree(self):
        op = self.entry("/a")
        self.store.set_subtree_lock(2, op)
        description, deployments = self.run_process(self.store.quiesce_subtree(2, op))
        self.assertEqual(len(description.nodes), 4)
        self.assertTrue(deployments)
        self.assertTrue(all(0 <= d < 4 for d in deployments))
        self.assertEqual(self.store.open_transactions(), [])
