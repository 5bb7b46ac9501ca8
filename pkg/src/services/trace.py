import enum
import json
from typing import Any

from pydantic import BaseModel, ConfigDict, field_validator

RESERVED_KEYS = frozenset({"t", "kind"})


class TraceKind(str, enum.Enum):
    round_open = "round-open"
    inv = "inv"
    ack = "ack"
    round_done = "round-done"
    round_timeout = "round-timeout"
    commit = "commit"
    abort = "abort"
    subtree_lock = "subtree-lock"
    subtree_clear = "subtree-clear"
    instance_join = "instance-join"
    instance_leave = "instance-leave"


class TraceEvent(BaseModel):
    t: int
    kind: TraceKind
    data: dict[str, Any] = {}

    model_config = ConfigDict(frozen = True)

    @field_validator("data")
    @classmethod
    def validate_data(cls, v: dict[str, Any]):
        clashing = RESERVED_KEYS & set(v)
        if clashing:
            raise ValueError(f"trace payload may not use the reserved keys {sorted(clashing)}")
        return v

    def to_line(self) -> str:
        """
        >>> TraceEvent(t = 5, kind = TraceKind.ack, data = {"round": 2}).to_line()
        '{"kind":"ack","round":2,"t":5}'
        """
        return json.dumps({**self.data, "t": self.t, "kind": self.kind.value}, sort_keys = True,
                          separators = (",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "TraceEvent":
        raw = json.loads(line)
        t = raw.pop("t")
        kind = TraceKind(raw.pop("kind"))
        return cls(t = t, kind = kind, data = raw)


class ProtocolTrace:
    """Append-only protocol log (JSON lines) of rounds, INV/ACK traffic, commits and subtree locks."""

    def __init__(self):
        self.events: list[TraceEvent] = []

    def record(self, t: int, kind: TraceKind, **data: Any) -> None:
        self.events.append(TraceEvent(t = t, kind = kind, data = data))

    def of_kind(self, kind: TraceKind) -> list[TraceEvent]:
        return [event for event in self.events if event.kind is kind]

    def lines(self) -> list[str]:
        return [event.to_line() for event in self.events]

    @classmethod
    def from_lines(cls, lines) -> "ProtocolTrace":
        trace = cls()
        trace.events = [TraceEvent.from_line(line) for line in lines if line.strip()]
        return trace
