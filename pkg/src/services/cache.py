import logging
from collections import OrderedDict
from dataclasses import dataclass, field

from src.schemas.inode import INodeRecord
from src.services.partitioning import components, join

logger = logging.getLogger(__name__)


@dataclass(eq = False)
class TrieNode:
    name: str
    path: str
    parent: "TrieNode | None" = None
    children: dict[str, "TrieNode"] = field(default_factory = dict)
    record: INodeRecord | None = None
    cached_at: int = 0


@dataclass(frozen = True)
class CacheLookup:
    """``records`` is the cached root→k prefix; ``hit`` when it covers the whole path."""
    hit: bool
    records: list[INodeRecord]

    @property
    def depth(self) -> int:
        return len(self.records)


class CacheTrie:
    """
    NameNode metadata cache. Every INode along a cached path is stored in a trie keyed by path
    component; recency is tracked over record-bearing nodes for LRU eviction. A node whose record
    is evicted stays as a structural node while it still has cached descendants.
    """

    def __init__(self, capacity: int | None = None):
        if capacity is not None and capacity < 1:
            raise ValueError(f"cache capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.root = TrieNode(name = "", path = "/")
        self._lru: OrderedDict[str, TrieNode] = OrderedDict()
        self._by_id: dict[int, str] = {}
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._lru)

    def _walk(self, path: str) -> list[TrieNode]:
        nodes = [self.root]
        for part in components(path):
            child = nodes[-1].children.get(part)
            if child is None:
                break
            nodes.append(child)
        return nodes

    def lookup(self, path: str) -> CacheLookup:
        """
        The lookup function returns the cached records along ``path``. A hit requires a record on
        every component from the root to the leaf; touched records become most recently used.

        :param path: str: Normalized path
        :return: CacheLookup with the longest fully cached prefix
        """
        expected = len(components(path)) + 1
        records = []
        for node in self._walk(path):
            if node.record is None:
                break
            records.append(node.record)
            self._lru.move_to_end(node.path)
        hit = len(records) == expected
        if hit:
            self.hits += 1
        else:
            self.misses += 1
        return CacheLookup(hit = hit, records = records)

    def insert_path(self, records: list[INodeRecord], now: int = 0) -> int:
        """
        The insert_path function caches every record of a resolved root→leaf chain. Over capacity,
        least recently used records from earlier calls are evicted first; when the chain alone is
        longer than the capacity only its root-most prefix is cached.

        :param records: list[INodeRecord]: Parent chain starting at the root
        :param now: int: Virtual time of insertion
        :return: Number of previously cached records evicted
        """
        if not records:
            return 0
        if not records[0].is_root:
            raise ValueError("cached paths must start at the root")
        if self.capacity is not None:
            records = records[:self.capacity]
        node = self.root
        touched = []
        for depth, record in enumerate(records):
            if depth > 0:
                if record.parent != records[depth - 1].id:
                    raise ValueError(f"record {record.id} is not a child of {records[depth - 1].id}")
                child = node.children.get(record.name)
                if child is None:
                    child = TrieNode(name = record.name, path = join(node.path, record.name), parent = node)
                    node.children[record.name] = child
                node = child
            self._store(node, record, now)
            touched.append(node.path)
        return self._evict(protected = set(touched))

    def _store(self, node: TrieNode, record: INodeRecord, now: int) -> None:
        if node.record is not None and node.record.id != record.id:
            self._by_id.pop(node.record.id, None)
        stale = self._by_id.get(record.id)
        if stale is not None and stale != node.path:
            self.invalidate(stale)
        node.record = record
        node.cached_at = now
        self._by_id[record.id] = node.path
        self._lru[node.path] = node
        self._lru.move_to_end(node.path)

    def _evict(self, protected: set[str]) -> int:
        if self.capacity is None:
            return 0
        evicted = 0
        for path in list(self._lru):
            if len(self._lru) <= self.capacity:
                break
            if path in protected:
                continue
            self._drop(self._lru[path])
            evicted += 1
        return evicted

    def _drop(self, node: TrieNode) -> None:
        if node.record is not None:
            self._by_id.pop(node.record.id, None)
        node.record = None
        self._lru.pop(node.path, None)
        self._prune(node)

    @staticmethod
    def _prune(node: TrieNode) -> None:
        while node.parent is not None and node.record is None and not node.children:
            del node.parent.children[node.name]
            node = node.parent

    def invalidate(self, target: str | int) -> int:
        """Point invalidation by path or INode id; descendants stay cached."""
        path = self._by_id.get(target) if isinstance(target, int) else target
        if path is None:
            return 0
        nodes = self._walk(path)
        node = nodes[-1]
        if node.path != path or node.record is None:
            return 0
        self._drop(node)
        return 1

    def invalidate_prefix(self, prefix: str) -> int:
        """Removes every record at or below ``prefix`` by cutting the trie branch."""
        nodes = self._walk(prefix)
        top = nodes[-1]
        if top.path != prefix:
            return 0
        removed = 0
        stack = [top]
        while stack:
            node = stack.pop()
            stack.extend(node.children.values())
            if node.record is not None:
                self._by_id.pop(node.record.id, None)
                self._lru.pop(node.path, None)
                node.record = None
                removed += 1
        if top.parent is None:
            top.children.clear()
        else:
            top.children.clear()
            self._prune(top)
        return removed

    def clear(self) -> int:
        return self.invalidate_prefix("/")

    def cached_ids(self) -> set[int]:
        return set(self._by_id)

    def dump(self) -> list[str]:
        return sorted(self._lru)
