class LambdaFSError(Exception):
    """Base class for every error raised by the metadata service simulator."""


class MalformedPath(LambdaFSError):
    def __init__(self, path: str, reason: str = "not an absolute normalized path"):
        super().__init__(f"{path!r}: {reason}")
        self.path = path
        self.reason = reason


class ScenarioError(LambdaFSError):
    """
    A scenario file could not be parsed or validated.

    :param message: str: Human readable diagnostic, including line/column or field location
    :param line: int | None: 1-based line of a parse error, when known
    :param column: int | None: 1-based column of a parse error, when known
    """

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        super().__init__(message)
        self.line = line
        self.column = column


class TraceMissing(LambdaFSError):
    pass


class VerificationFailed(LambdaFSError):
    pass


# store

class StoreError(LambdaFSError):
    pass


class TxnAborted(StoreError):
    def __init__(self, txn_id: int, reason: str):
        super().__init__(f"txn {txn_id} aborted: {reason}")
        self.txn_id = txn_id
        self.reason = reason


class SubtreeConflict(StoreError):
    def __init__(self, root_path: str, holder_op: int):
        super().__init__(f"subtree {root_path!r} overlaps live subtree operation {holder_op}")
        self.root_path = root_path
        self.holder_op = holder_op


class LockOrderViolation(StoreError):
    pass


class CommitBarrierViolation(StoreError):
    pass


# namespace, returned to clients inside responses

class NamespaceError(LambdaFSError):
    code = "namespace-error"

    def __init__(self, path: str):
        super().__init__(f"{self.code}: {path}")
        self.path = path


class FileNotFound(NamespaceError):
    code = "not-found"


class AlreadyExists(NamespaceError):
    code = "already-exists"


class NotADirectory(NamespaceError):
    code = "not-a-directory"


class DirectoryNotEmpty(NamespaceError):
    code = "not-empty"


class InvalidMove(NamespaceError):
    code = "invalid-move"


NAMESPACE_ERRORS: dict[str, type[NamespaceError]] = {
    cls.code: cls for cls in (FileNotFound, AlreadyExists, NotADirectory, DirectoryNotEmpty, InvalidMove)
}


# transport, retried by the client

class TransportError(LambdaFSError):
    pass


class RpcTimeout(TransportError):
    pass


class RoundTimeout(TransportError):
    def __init__(self, round_id: int, missing: int):
        super().__init__(f"coherence round {round_id} timed out waiting for {missing} ACKs")
        self.round_id = round_id
        self.missing = missing


class CapacityExhausted(TransportError):
    pass


class ConnectionDropped(TransportError):
    pass


class GiveUp(LambdaFSError):
    def __init__(self, request_id: str, attempts: int):
        super().__init__(f"request {request_id} gave up after {attempts} attempts")
        self.request_id = request_id
        self.attempts = attempts


class OperationFailed(LambdaFSError):
    def __init__(self, request_id: str, code: str, path: str):
        super().__init__(f"request {request_id} failed: {code} {path}")
        self.request_id = request_id
        self.code = code
        self.path = path
