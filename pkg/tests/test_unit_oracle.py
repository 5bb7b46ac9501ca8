import unittest

import pytest

from src.services.oracle import HistoryEvent, build_history, check_commit_barrier, check_exactly_once, \
    check_per_inode_linearizable, check_subtree_isolation, compare_snapshot, replay_commits, run_verification
from src.services.trace import ProtocolTrace, TraceKind


def write(inode: int, version: int, parent: int = 1, name: str = "f", kind: str = "file", perms: int = 0o644,
          deleted: bool = False) -> dict:
    return {"id": inode, "parent": parent, "name": name, "kind": kind, "perms": perms, "version": version,
            "deleted": deleted}


def request(request_id: str, op: str, invoked_at: int, completed_at: int | None, inode: int | None = None,
            version: int | None = None, status: str = "ok") -> dict:
    return {"request_id": request_id, "client_id": 0, "op": op, "status": status, "inode": inode,
            "version": version, "invoked_at": invoked_at, "completed_at": completed_at}


def populated() -> ProtocolTrace:
    trace = ProtocolTrace()
    trace.record(0, TraceKind.commit, txn = 0, owner = "populate", request = None,
                 writes = [write(2, 1, name = "a", kind = "directory", perms = 0o755), write(3, 1, parent = 2)])
    return trace


def with_round(trace: ProtocolTrace, t: int, round_id: int, leader: str = "d0-0") -> None:
    trace.record(t, TraceKind.round_open, round = round_id, leader = leader)
    trace.record(t + 5, TraceKind.round_done, round = round_id, acks = 0)


def chmod_history(read_window: tuple[int, int], read_version: int) -> tuple[list[dict], ProtocolTrace]:
    trace = populated()
    with_round(trace, 110, 1)
    trace.record(150, TraceKind.commit, txn = 1, owner = "d0-0", request = "c0-1", op = None,
                 writes = [write(3, 2, parent = 2, perms = 0o600)])
    requests = [request("c0-1", "chmod", 100, 200, 3, 2),
                request("c1-1", "read", read_window[0], read_window[1], 3, read_version)]
    return requests, trace


class TestReplay(unittest.TestCase):

    def test_snapshot_matches_replay(self):
        requests, trace = chmod_history((300, 400), 2)
        tree = replay_commits(trace)
        self.assertEqual(tree.applied, 3)
        self.assertEqual(tree.path_of(3), "/a/f")
        snapshot = [dict(row) for row in tree.rows()]
        self.assertIsNone(compare_snapshot(tree, snapshot))

    def test_divergence_names_path(self):
        _, trace = chmod_history((300, 400), 2)
        tree = replay_commits(trace)
        snapshot = tree.rows()
        snapshot[2] = dict(snapshot[2], version = 1)
        self.assertTrue(compare_snapshot(tree, snapshot).startswith("/a/f:"))

    def test_missing_row_diverges(self):
        tree = replay_commits(populated())
        self.assertIsNotNone(compare_snapshot(tree, tree.rows()[:2]))

    def test_deletes_remove_entries(self):
        trace = populated()
        trace.record(50, TraceKind.commit, txn = 1, owner = "d0-0", request = "c0-1",
                     writes = [write(3, 2, parent = 2, deleted = True)])
        tree = replay_commits(trace)
        self.assertEqual([row["id"] for row in tree.rows()], [1, 2])
        self.assertEqual(tree.shape_problems(), [])

    def test_orphans_are_shape_problems(self):
        trace = ProtocolTrace()
        trace.record(0, TraceKind.commit, txn = 0, owner = "populate", request = None,
                     writes = [write(4, 1, parent = 9)])
        self.assertEqual(len(replay_commits(trace).shape_problems()), 1)


class TestLinearizability(unittest.TestCase):

    def check(self, requests, trace, limit = 64):
        return check_per_inode_linearizable(build_history(requests, trace), limit)

    def test_read_after_write_sees_it(self):
        self.assertEqual(self.check(*chmod_history((300, 400), 2)), [])

    def test_concurrent_read_may_see_either(self):
        for version in (1, 2):
            self.assertEqual(self.check(*chmod_history((120, 180), version)), [])

    def test_stale_read_is_a_counterexample(self):
        failures = self.check(*chmod_history((300, 400), 1))
        self.assertEqual(len(failures), 1)
        self.assertEqual(failures[0].inode, 3)
        self.assertIn("stale read", failures[0].reason)
        self.assertIn("c1-1", failures[0].describe())

    def test_large_registers_use_version_order(self):
        failures = self.check(*chmod_history((300, 400), 1), limit = 1)
        self.assertIn("stale read", failures[0].reason)

    def test_unknown_version(self):
        failures = self.check(*chmod_history((300, 400), 9))
        self.assertIn("no commit wrote", failures[0].reason)

    def test_unanswered_write_may_land_late(self):
        requests, trace = chmod_history((300, 400), 1)
        requests[0] = request("c0-1", "chmod", 100, None, status = "gave-up")
        self.assertEqual(self.check(requests, trace), [])

    def test_non_monotonic_reads(self):
        events = [HistoryEvent(inode = 3, value = 1, invoked_at = 0, responded_at = 0, is_write = True),
                  HistoryEvent(inode = 3, value = 2, invoked_at = 100, responded_at = None, is_write = True),
                  HistoryEvent(inode = 3, value = 2, invoked_at = 200, responded_at = 250, is_write = False),
                  HistoryEvent(inode = 3, value = 1, invoked_at = 300, responded_at = 350, is_write = False)]
        self.assertEqual(len(check_per_inode_linearizable(events)), 1)
        self.assertIn("non-monotonic", check_per_inode_linearizable(events, limit = 1)[0].reason)


class TestProtocolChecks(unittest.TestCase):

    def subtree_trace(self, second_path: str) -> ProtocolTrace:
        trace = populated()
        trace.record(100, TraceKind.subtree_lock, op = 1, root = 2, path = "/a")
        trace.record(150, TraceKind.subtree_lock, op = 2, root = 4, path = second_path)
        trace.record(200, TraceKind.commit, txn = 2, owner = "d0-0", request = None, op = 1,
                     writes = [write(3, 2, parent = 2)])
        trace.record(300, TraceKind.subtree_clear, op = 1, root = 2, path = "/a")
        trace.record(400, TraceKind.subtree_clear, op = 2, root = 4, path = second_path)
        return trace

    def test_overlapping_subtrees(self):
        violations = check_subtree_isolation([], self.subtree_trace("/a/b"))
        self.assertEqual(len(violations), 1)
        self.assertIn("overlapping", violations[0])

    def test_disjoint_subtrees(self):
        self.assertEqual(check_subtree_isolation([], self.subtree_trace("/c")), [])

    def test_read_inside_subtree_window(self):
        early = HistoryEvent(inode = 3, value = 2, invoked_at = 220, responded_at = 250, is_write = False,
                             request_id = "c1-1")
        late = HistoryEvent(inode = 3, value = 2, invoked_at = 220, responded_at = 350, is_write = False)
        trace = self.subtree_trace("/c")
        self.assertEqual(len(check_subtree_isolation([early], trace)), 1)
        self.assertEqual(check_subtree_isolation([late], trace), [])

    def test_exactly_once(self):
        trace = populated()
        for t in (10, 20):
            trace.record(t, TraceKind.commit, txn = t, owner = "d0-0", request = "c0-1", writes = [write(3, t)])
        self.assertEqual(check_exactly_once(trace), ["request c0-1 committed 2 times"])

    def test_commit_barrier(self):
        trace = populated()
        with_round(trace, 10, 1)
        trace.record(30, TraceKind.commit, txn = 1, owner = "d0-0", request = "c0-1", writes = [write(3, 2)])
        trace.record(40, TraceKind.commit, txn = 2, owner = "d0-0", request = "c0-2", writes = [write(3, 3)])
        trace.record(50, TraceKind.commit, txn = 3, owner = "d0-0", request = "c0-3", op = 7, writes = [write(3, 4)])
        self.assertEqual(check_commit_barrier(trace), ["commit of c0-2 by d0-0 without a completed round"])


@pytest.mark.parametrize("read_version, passed", [(2, True), (1, False)])
def test_run_verification(read_version, passed):
    requests, trace = chmod_history((300, 400), read_version)
    report = run_verification(requests, trace, replay_commits(trace).rows())
    assert report.passed is passed
    assert report.failed() == ([] if passed else ["per-inode-linearizability"])
    assert len(report.properties) == 6
