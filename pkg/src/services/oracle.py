"""
Offline correctness checks over a finished run.

The protocol trace gives the total commit order; replaying it into a plain in-memory tree must
reproduce the store's final snapshot. Each INode is then checked as a register whose values are
its versions: every read must be explainable by some order of the committed writes that respects
the invoke/response intervals of the requests that caused them.
"""
import heapq
import logging
import math
from collections import Counter, defaultdict
from collections.abc import Iterable
from dataclasses import dataclass, field

from pydantic import BaseModel

from src.entity.models import ROOT_ID
from src.services.partitioning import is_prefix
from src.services.trace import ProtocolTrace, TraceKind

logger = logging.getLogger(__name__)

SEARCH_LIMIT = 64
READ_OPS = frozenset({"read", "stat", "ls"})
SNAPSHOT_FIELDS = ("id", "parent", "name", "kind", "perms", "version")


@dataclass(frozen = True)
class HistoryEvent:
    """One register operation on one INode. ``responded_at`` None means the response never arrived."""
    inode: int
    value: int
    invoked_at: int
    responded_at: int | None
    is_write: bool
    request_id: str | None = None
    client_id: int | None = None
    op: str = ""
    definite: bool = True

    @property
    def response_bound(self) -> float:
        return math.inf if self.responded_at is None else self.responded_at


@dataclass
class ReferenceEntry:
    id: int
    parent: int
    name: str
    kind: str
    perms: int
    version: int


class ReferenceTree:
    """Plain namespace tree applying committed writes one after another."""

    def __init__(self):
        self.entries: dict[int, ReferenceEntry] = {
            ROOT_ID: ReferenceEntry(id = ROOT_ID, parent = ROOT_ID, name = "", kind = "directory", perms = 0o755,
                                    version = 1)
        }
        self.applied = 0

    def apply(self, write: dict) -> None:
        if write.get("deleted"):
            self.entries.pop(write["id"], None)
        else:
            self.entries[write["id"]] = ReferenceEntry(**{key: write[key] for key in SNAPSHOT_FIELDS})
        self.applied += 1

    def path_of(self, inode_id: int) -> str | None:
        names = []
        current = self.entries.get(inode_id)
        seen = set()
        while current is not None and current.id != ROOT_ID:
            if current.id in seen:
                return None
            seen.add(current.id)
            names.append(current.name)
            current = self.entries.get(current.parent)
        if current is None:
            return None
        return "/" + "/".join(reversed(names)) if names else "/"

    def shape_problems(self) -> list[str]:
        """Orphans, cycles, non-directory parents and duplicate (parent, name) pairs."""
        problems = []
        names: Counter = Counter()
        for entry in self.entries.values():
            if entry.id == ROOT_ID:
                continue
            names[(entry.parent, entry.name)] += 1
            parent = self.entries.get(entry.parent)
            if parent is None:
                problems.append(f"inode {entry.id} ({entry.name}) has no live parent {entry.parent}")
            elif parent.kind != "directory":
                problems.append(f"inode {entry.id} ({entry.name}) lives under file {entry.parent}")
            elif self.path_of(entry.id) is None:
                problems.append(f"inode {entry.id} ({entry.name}) is on a parent cycle")
        problems += [f"duplicate name {name!r} under {parent}" for (parent, name), count in names.items() if count > 1]
        return sorted(problems)

    def rows(self) -> list[dict]:
        return [{key: getattr(entry, key) for key in SNAPSHOT_FIELDS}
                for entry in sorted(self.entries.values(), key = lambda e: e.id)]


def replay_commits(trace: ProtocolTrace) -> ReferenceTree:
    """
    >>> replay_commits(ProtocolTrace()).rows()[0]["id"]
    1
    """
    tree = ReferenceTree()
    for event in trace.of_kind(TraceKind.commit):
        for write in event.data.get("writes", []):
            tree.apply(write)
    return tree


def compare_snapshot(tree: ReferenceTree, snapshot: Iterable[dict]) -> str | None:
    """
    The compare_snapshot function compares a replayed tree with a store snapshot.

    :param tree: ReferenceTree: Replay of the commit order
    :param snapshot: Iterable[dict]: Store records, one per INode
    :return: None when equal, else a diagnostic naming the first divergent path
    """
    expected = {row["id"]: row for row in tree.rows()}
    actual = {int(row["id"]): {key: _plain(row.get(key)) for key in SNAPSHOT_FIELDS} for row in snapshot}
    divergent = []
    for inode_id in sorted(set(expected) | set(actual)):
        want, got = expected.get(inode_id), actual.get(inode_id)
        if want != got:
            path = tree.path_of(inode_id) or f"<inode {inode_id}>"
            divergent.append((path, inode_id, want, got))
    if not divergent:
        return None
    path, inode_id, want, got = min(divergent, key = lambda d: (d[0], d[1]))
    return f"{path}: replay has {want}, store has {got}"


def _plain(value):
    return value.value if hasattr(value, "value") else value


def _int_or_none(value) -> int | None:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return int(value)


def build_history(requests: Iterable[dict], trace: ProtocolTrace) -> list[HistoryEvent]:
    """
    The build_history function turns request records and the commit trace into register events.
    Reads come from successful read-kind requests; writes come from commits. A commit carrying a
    request id inherits that request's interval (open-ended when the request never completed);
    commits of subtree batches inherit the interval of the request whose root commit carries the
    same subtree operation; anything else is pinned to its commit instant.

    :param requests: Iterable[dict]: Request records (request_id, client_id, op, status, inode,
        version, invoked_at, completed_at)
    :param trace: ProtocolTrace: Protocol trace of the run
    :return: list[HistoryEvent]
    """
    by_request = {}
    events = []
    for row in requests:
        by_request[row["request_id"]] = row
        if row["op"] in READ_OPS and row["status"] == "ok":
            inode, version = _int_or_none(row.get("inode")), _int_or_none(row.get("version"))
            completed = _int_or_none(row.get("completed_at"))
            if inode is None or version is None or completed is None:
                continue
            events.append(HistoryEvent(inode = inode, value = version, invoked_at = int(row["invoked_at"]),
                                       responded_at = completed, is_write = False, request_id = row["request_id"],
                                       client_id = _int_or_none(row.get("client_id")), op = row["op"]))
    commits = trace.of_kind(TraceKind.commit)
    op_requests = {event.data["op"]: event.data["request"] for event in commits
                   if event.data.get("op") is not None and event.data.get("request") is not None}
    for event in commits:
        request_id = event.data.get("request")
        if request_id is None and event.data.get("op") is not None:
            request_id = op_requests.get(event.data["op"])
        row = by_request.get(request_id) if request_id is not None else None
        if row is not None:
            invoked, responded = int(row["invoked_at"]), _int_or_none(row.get("completed_at"))
        elif request_id is not None:
            invoked, responded = event.t, None
        else:
            invoked, responded = event.t, event.t
        for write in event.data.get("writes", []):
            events.append(HistoryEvent(inode = write["id"], value = write["version"], invoked_at = invoked,
                                       responded_at = responded, is_write = True, request_id = request_id,
                                       op = "delete" if write.get("deleted") else "write"))
    return events


@dataclass
class Counterexample:
    inode: int
    reason: str
    events: list[HistoryEvent] = field(default_factory = list)

    def describe(self) -> str:
        involved = ", ".join(f"{'w' if e.is_write else 'r'}{e.value}@[{e.invoked_at},{e.responded_at}]"
                             f"{'(' + e.request_id + ')' if e.request_id else ''}" for e in self.events[:6])
        return f"inode {self.inode}: {self.reason}" + (f" ({involved})" if involved else "")


def _search(events: list[HistoryEvent]) -> bool:
    """
    Wing–Gong style search for a legal register order. Versions never repeat on one INode, so a
    read that matches the current value and may go next is placed immediately; only writes branch.
    """
    n = len(events)
    full = (1 << n) - 1
    stack: list[tuple[int, int | None]] = [(0, None)]
    seen = set()
    while stack:
        mask, value = stack.pop()
        while True:
            pending = [i for i in range(n) if not mask >> i & 1]
            horizon = min((events[i].response_bound for i in pending), default = math.inf)
            ready = [i for i in pending if events[i].invoked_at <= horizon]
            placed = False
            for i in ready:
                if not events[i].is_write and events[i].value == value:
                    mask |= 1 << i
                    placed = True
                    break
            if not placed:
                break
        if mask == full:
            return True
        if (mask, value) in seen:
            continue
        seen.add((mask, value))
        for i in ready:
            event = events[i]
            if event.is_write:
                stack.append((mask | 1 << i, event.value))
                if not event.definite and event.responded_at is None:
                    stack.append((mask | 1 << i, value))
    return False


def _version_order(events: list[HistoryEvent]) -> Counterexample | None:
    """Linear-time necessary conditions used when a register has too many operations to search."""
    writes = sorted((e for e in events if e.is_write), key = lambda e: e.value)
    reads = sorted((e for e in events if not e.is_write), key = lambda e: (e.invoked_at, e.response_bound))
    if not reads:
        return None
    inode = events[0].inode
    by_value = {write.value: write for write in writes}
    later_done = {}
    earliest = math.inf
    for write in reversed(writes):
        later_done[write.value] = earliest
        earliest = min(earliest, write.response_bound)
    for read in reads:
        write = by_value.get(read.value)
        if write is None:
            return Counterexample(inode, f"read returned version {read.value} that no commit wrote", [read])
        if read.response_bound < write.invoked_at:
            return Counterexample(inode, "read returned a version before its write was invoked", [write, read])
        if later_done[read.value] < read.invoked_at:
            newer = min((w for w in writes if w.value > read.value), key = lambda w: w.response_bound)
            return Counterexample(inode, "stale read: a newer version was complete before the read began",
                                  [newer, read])
    finished: list[tuple[float, int, HistoryEvent]] = []
    highest: HistoryEvent | None = None
    for index, read in enumerate(reads):
        while finished and finished[0][0] < read.invoked_at:
            _, _, done = heapq.heappop(finished)
            if highest is None or done.value > highest.value:
                highest = done
        if highest is not None and read.value < highest.value:
            return Counterexample(inode, "non-monotonic reads", [highest, read])
        heapq.heappush(finished, (read.response_bound, index, read))
    return None


def check_per_inode_linearizable(history: Iterable[HistoryEvent],
                                 limit: int = SEARCH_LIMIT) -> list[Counterexample]:
    """
    The check_per_inode_linearizable function checks every INode as a register. Registers with at
    most ``limit`` events are searched exhaustively; larger ones get the version-order checks.

    :param history: Iterable[HistoryEvent]: Register events of a run
    :param limit: int: Largest register searched exhaustively
    :return: One Counterexample per failing INode; empty when the history is linearizable
    """
    registers: dict[int, list[HistoryEvent]] = defaultdict(list)
    for event in history:
        registers[event.inode].append(event)
    failures = []
    for inode in sorted(registers):
        events = sorted(registers[inode], key = lambda e: (e.invoked_at, e.response_bound, not e.is_write, e.value))
        if not any(not event.is_write for event in events):
            continue
        if len(events) <= limit:
            if not _search(events):
                failures.append(_version_order(events) or Counterexample(inode, "no legal order of the register",
                                                                         events))
        else:
            counterexample = _version_order(events)
            if counterexample is not None:
                failures.append(counterexample)
    return failures


class SubtreeWindow(BaseModel):
    op: int
    path: str
    locked_at: int
    cleared_at: int | None = None

    @property
    def end(self) -> float:
        return math.inf if self.cleared_at is None else self.cleared_at


def subtree_windows(trace: ProtocolTrace) -> dict[int, SubtreeWindow]:
    windows: dict[int, SubtreeWindow] = {}
    for event in trace.events:
        if event.kind is TraceKind.subtree_lock:
            windows[event.data["op"]] = SubtreeWindow(op = event.data["op"], path = event.data["path"],
                                                      locked_at = event.t)
        elif event.kind is TraceKind.subtree_clear and event.data["op"] in windows:
            windows[event.data["op"]] = windows[event.data["op"]].model_copy(update = {"cleared_at": event.t})
    return windows


def check_subtree_isolation(history: Iterable[HistoryEvent], trace: ProtocolTrace) -> list[str]:
    """
    The check_subtree_isolation function flags overlapping subtree operations whose lock windows
    intersect, and reads that returned a version written by a subtree operation before that
    operation released its subtree.

    :param history: Iterable[HistoryEvent]: Register events of the run
    :param trace: ProtocolTrace: Protocol trace with subtree lock and clear events
    :return: Violations, empty when isolation held
    """
    windows = sorted(subtree_windows(trace).values(), key = lambda w: (w.locked_at, w.op))
    violations = []
    for i, first in enumerate(windows):
        for second in windows[i + 1:]:
            if second.locked_at >= first.end:
                continue
            if is_prefix(first.path, second.path) or is_prefix(second.path, first.path):
                violations.append(f"subtree operations {first.op} ({first.path}) and {second.op} ({second.path}) "
                                  f"held overlapping subtrees at t={second.locked_at}")
    by_op = {window.op: window for window in windows}
    written_by: dict[tuple[int, int], int] = {}
    for event in trace.of_kind(TraceKind.commit):
        op = event.data.get("op")
        if op is None:
            continue
        for write in event.data.get("writes", []):
            written_by[(write["id"], write["version"])] = op
    for read in history:
        if read.is_write:
            continue
        op = written_by.get((read.inode, read.value))
        if op is None or op not in by_op:
            continue
        if read.response_bound < by_op[op].end:
            violations.append(f"read {read.request_id} saw inode {read.inode} v{read.value} of subtree operation "
                              f"{op} before it released {by_op[op].path}")
    return violations


def check_exactly_once(trace: ProtocolTrace) -> list[str]:
    applied = Counter(event.data["request"] for event in trace.of_kind(TraceKind.commit)
                      if event.data.get("request") is not None)
    return [f"request {request_id} committed {count} times" for request_id, count in sorted(applied.items())
            if count > 1]


def check_commit_barrier(trace: ProtocolTrace) -> list[str]:
    """Every single-INode commit consumes one round its owner completed before it."""
    problems = []
    done_by: Counter = Counter()
    opened: dict[int, str] = {}
    for event in trace.events:
        if event.kind is TraceKind.round_open:
            opened[event.data["round"]] = event.data["leader"]
        elif event.kind is TraceKind.round_done:
            leader = opened.get(event.data["round"])
            if leader is not None:
                done_by[leader] += 1
        elif event.kind is TraceKind.commit and event.data.get("request") is not None and event.data.get("writes"):
            if event.data.get("op") is not None:
                continue
            owner = event.data["owner"]
            if done_by[owner] <= 0:
                problems.append(f"commit of {event.data['request']} by {owner} without a completed round")
            else:
                done_by[owner] -= 1
    return problems


class PropertyResult(BaseModel):
    name: str
    passed: bool
    checked: int = 0
    violations: list[str] = []


class VerifyReport(BaseModel):
    passed: bool
    properties: list[PropertyResult]

    def failed(self) -> list[str]:
        return [result.name for result in self.properties if not result.passed]


def run_verification(requests: list[dict], trace: ProtocolTrace, snapshot: list[dict],
                     limit: int = SEARCH_LIMIT, max_reported: int = 20) -> VerifyReport:
    """
    The run_verification function runs the whole oracle suite over one run's artifacts.

    :param requests: list[dict]: Request records
    :param trace: ProtocolTrace: Protocol trace
    :param snapshot: list[dict]: Final store snapshot
    :param limit: int: Largest register searched exhaustively
    :param max_reported: int: Violations kept per property
    :return: VerifyReport
    """
    tree = replay_commits(trace)
    divergence = compare_snapshot(tree, snapshot)
    shape = tree.shape_problems()
    history = build_history(requests, trace)
    counterexamples = check_per_inode_linearizable(history, limit)
    isolation = check_subtree_isolation(history, trace)
    duplicates = check_exactly_once(trace)
    barrier = check_commit_barrier(trace)
    reads = sum(1 for event in history if not event.is_write)
    properties = [
        PropertyResult(name = "snapshot-replay", passed = divergence is None, checked = tree.applied,
                       violations = [divergence] if divergence else []),
        PropertyResult(name = "tree-shape", passed = not shape, checked = len(tree.entries),
                       violations = shape[:max_reported]),
        PropertyResult(name = "per-inode-linearizability", passed = not counterexamples, checked = reads,
                       violations = [c.describe() for c in counterexamples[:max_reported]]),
        PropertyResult(name = "subtree-isolation", passed = not isolation, checked = len(subtree_windows(trace)),
                       violations = isolation[:max_reported]),
        PropertyResult(name = "exactly-once", passed = not duplicates,
                       checked = len(trace.of_kind(TraceKind.commit)), violations = duplicates[:max_reported]),
        PropertyResult(name = "commit-barrier", passed = not barrier, checked = len(trace.of_kind(TraceKind.commit)),
                       violations = barrier[:max_reported]),
    ]
    report = VerifyReport(passed = all(result.passed for result in properties), properties = properties)
    for result in properties:
        if not result.passed:
            logger.warning("verification failed: %s (%d violations)", result.name, len(result.violations))
    return report
