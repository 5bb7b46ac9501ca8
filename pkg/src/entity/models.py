import enum

from sqlalchemy import BigInteger, Boolean, Enum, Integer, String, Text, UniqueConstraint
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column

ROOT_ID = 1
DEFAULT_PERMS = 0o755


class Base(DeclarativeBase):
    pass


class INodeKind(enum.Enum):
    file: str = "file"
    directory: str = "directory"


class SubtreeOpKind(enum.Enum):
    mv: str = "mv"
    delete: str = "delete"


class INode(Base):
    __tablename__ = 'inodes'
    __table_args__ = (UniqueConstraint('parent_id', 'name', name = 'uq_inode_parent_name'),)

    id: Mapped[int] = mapped_column(BigInteger, primary_key = True, autoincrement = False)
    parent_id: Mapped[int] = mapped_column(BigInteger, nullable = False, index = True)
    name: Mapped[str] = mapped_column(String(255), nullable = False)
    kind: Mapped[INodeKind] = mapped_column('kind', Enum(INodeKind), nullable = False)
    perms: Mapped[int] = mapped_column(Integer, default = DEFAULT_PERMS, nullable = False)
    mtime: Mapped[int] = mapped_column(BigInteger, default = 0, nullable = False)
    version: Mapped[int] = mapped_column(BigInteger, default = 1, nullable = False)
    subtree_locked: Mapped[bool] = mapped_column(Boolean, default = False, nullable = False)
    subtree_op_id: Mapped[int] = mapped_column(BigInteger, nullable = True)


class SubtreeOp(Base):
    __tablename__ = 'subtree_ops'

    op_id: Mapped[int] = mapped_column(BigInteger, primary_key = True, autoincrement = False)
    root_id: Mapped[int] = mapped_column(BigInteger, nullable = False, index = True)
    root_path: Mapped[str] = mapped_column(Text, nullable = False)
    kind: Mapped[SubtreeOpKind] = mapped_column('kind', Enum(SubtreeOpKind), nullable = False)
    started_at: Mapped[int] = mapped_column(BigInteger, nullable = False)
    owner: Mapped[str] = mapped_column(String(64), nullable = False)


class AppliedRequest(Base):
    __tablename__ = 'applied_requests'

    request_id: Mapped[str] = mapped_column(String(64), primary_key = True)
    outcome: Mapped[str] = mapped_column(Text, nullable = False)
    committed_at: Mapped[int] = mapped_column(BigInteger, nullable = False)
