import enum

from pydantic import BaseModel, ConfigDict, Field

from src.schemas.scenario import OpKind


class Via(str, enum.Enum):
    tcp = "tcp"
    http = "http"


class ResponseStatus(str, enum.Enum):
    ok = "ok"
    error = "error"
    retry = "retry"


class RpcRequest(BaseModel):
    request_id: str
    client_id: int
    op: OpKind
    path: str
    dst: str | None = None
    perms: int | None = Field(None, ge = 0, le = 0o777)
    via: Via = Via.tcp
    attempt: int = Field(1, ge = 1)
    issued_at: int = 0

    model_config = ConfigDict(frozen = True)


class RpcResponse(BaseModel):
    """
    Reply of one NameNode. ``status`` is ok, error (a namespace error with its ``code``, final) or
    retry (transient protocol failure the client resubmits). ``inode``/``version`` identify the
    register value read or written.
    """
    request_id: str
    status: ResponseStatus = ResponseStatus.ok
    code: str | None = None
    inode: int | None = None
    version: int | None = None
    listing: int | None = None
    writes: list[tuple[int, int]] = []
    served_by: str | None = None
    cache_hit: bool = False
    deduplicated: bool = False

    model_config = ConfigDict(frozen = True)

    @property
    def ok(self) -> bool:
        return self.status is ResponseStatus.ok
