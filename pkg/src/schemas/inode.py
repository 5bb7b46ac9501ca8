from pydantic import BaseModel, ConfigDict, Field

from src.entity.models import DEFAULT_PERMS, ROOT_ID, INodeKind, SubtreeOpKind


class INodeRecord(BaseModel):
    id: int = Field(gt = 0)
    parent: int = Field(gt = 0)
    name: str
    kind: INodeKind
    perms: int = Field(DEFAULT_PERMS, ge = 0, le = 0o777)
    mtime: int = Field(0, ge = 0)
    version: int = Field(1, ge = 1)
    subtree_lock: bool = False
    subtree_op: int | None = None

    model_config = ConfigDict(from_attributes = True, frozen = True)

    @classmethod
    def from_row(cls, row) -> "INodeRecord":
        return cls(id = row.id, parent = row.parent_id, name = row.name, kind = row.kind, perms = row.perms,
                   mtime = row.mtime, version = row.version, subtree_lock = row.subtree_locked,
                   subtree_op = row.subtree_op_id)

    @property
    def is_dir(self) -> bool:
        return self.kind is INodeKind.directory

    @property
    def is_root(self) -> bool:
        return self.id == ROOT_ID


def root_record() -> INodeRecord:
    return INodeRecord(id = ROOT_ID, parent = ROOT_ID, name = "", kind = INodeKind.directory)


class PathResolution(BaseModel):
    """
    Result of a batched path resolution: records root→leaf for the longest resolvable prefix.
    ``miss_depth`` is None when every component resolved, else the index of the first missing component.
    """
    path: str
    records: list[INodeRecord]
    miss_depth: int | None = None

    model_config = ConfigDict(frozen = True)

    @property
    def found(self) -> bool:
        return self.miss_depth is None

    @property
    def leaf(self) -> INodeRecord:
        return self.records[-1]


class SubtreeOpEntry(BaseModel):
    op_id: int
    root: int
    root_path: str
    kind: SubtreeOpKind
    started_at: int
    owner: str

    model_config = ConfigDict(from_attributes = True, frozen = True)


class SubtreeNode(BaseModel):
    """One INode of a quiesced subtree with its absolute path and depth below the subtree root."""
    record: INodeRecord
    path: str
    depth: int

    model_config = ConfigDict(frozen = True)


class SubtreeDescription(BaseModel):
    root_path: str
    nodes: list[SubtreeNode]

    model_config = ConfigDict(frozen = True)

    @property
    def root(self) -> SubtreeNode:
        return self.nodes[0]

    def paths(self) -> list[str]:
        return [node.path for node in self.nodes]
