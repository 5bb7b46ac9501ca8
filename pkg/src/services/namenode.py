import logging
from collections.abc import Generator

from src.entity.models import SubtreeOpKind, INodeKind
from src.exceptions import AlreadyExists, DirectoryNotEmpty, FileNotFound, InvalidMove, NamespaceError, \
    NotADirectory, StoreError, TransportError
from src.repository.namespace import NamespaceStore
from src.schemas.inode import INodeRecord, PathResolution
from src.schemas.rpc import ResponseStatus, RpcRequest, RpcResponse
from src.schemas.scenario import OpKind, PolicyConfig, seconds_to_us
from src.services.coherence import CoherentWriter, WriteEffect
from src.services.partitioning import basename, children_deployment, components, deployment_for, is_prefix, join, \
    parent_directory
from src.services.platform import FunctionInstance, Platform

logger = logging.getLogger(__name__)


def routing_deployment(op: OpKind, path: str, n: int) -> int:
    """Deployment a request for ``op`` on ``path`` is sent to: ``ls`` goes to the owner of the children."""
    if op is OpKind.ls:
        return children_deployment(path, n)
    return deployment_for(path, n)


class NameNode:
    """
    Request handler living inside one function instance. Reads are answered from the instance's
    cache when every path component is cached, otherwise from the store; writes go through the
    coherence protocol. Results are remembered per request id so resubmissions are not re-applied.
    """

    def __init__(self, instance: FunctionInstance, store: NamespaceStore, writer: CoherentWriter,
                 platform: Platform, policy: PolicyConfig | None = None):
        self.instance = instance
        self.store = store
        self.writer = writer
        self.platform = platform
        self.policy = policy or PolicyConfig()
        self.kernel = platform.kernel
        self.n = platform.n_deployments

    def responsible_for(self, request: RpcRequest) -> bool:
        return routing_deployment(request.op, request.path, self.n) == self.instance.deployment

    def handle(self, request: RpcRequest) -> Generator:
        """
        The handle function serves one RPC on this instance, over TCP or HTTP alike.

        :param request: RpcRequest: Client request
        :return: RpcResponse; namespace errors come back as status error, transient protocol
            failures as status retry
        """
        instance = self.instance
        remembered = instance.cached_result(request.request_id, self.kernel.now)
        if remembered is not None:
            return remembered.model_copy(update = {"deduplicated": True})
        yield from self.platform.cpu_burst(instance)
        try:
            if request.op.is_write:
                response = yield from self._write(request)
            else:
                response = yield from self._read(request)
        except NamespaceError as err:
            response = RpcResponse(request_id = request.request_id, status = ResponseStatus.error, code = err.code)
        except (StoreError, TransportError) as err:
            logger.debug("t=%d %s retry %s: %s", self.kernel.now, instance.instance_id, request.request_id, err)
            response = RpcResponse(request_id = request.request_id, status = ResponseStatus.retry,
                                   code = type(err).__name__)
        response = response.model_copy(update = {"request_id": request.request_id,
                                                 "served_by": instance.instance_id})
        if response.status is not ResponseStatus.retry:
            instance.remember_result(request.request_id, response,
                                     self.kernel.now + seconds_to_us(self.policy.result_cache_ttl_s))
        return response

    # ---- reads

    def _read(self, request: RpcRequest) -> Generator:
        cache = self.instance.cache
        responsible = self.responsible_for(request)
        hint = []
        if responsible:
            lookup = cache.lookup(request.path)
            if lookup.hit and request.op is not OpKind.ls:
                leaf = lookup.records[-1]
                return RpcResponse(request_id = request.request_id, inode = leaf.id, version = leaf.version,
                                   cache_hit = True)
            hint = lookup.records
        resolution = yield from self.store.read_path(request.path, hint, self.instance.rng)
        listing = None
        if resolution.found and request.op is OpKind.ls and resolution.leaf.is_dir:
            listing = len(self.store.list_children(resolution.leaf.id))
        if not resolution.found:
            raise FileNotFound(request.path)
        if responsible and request.op is not OpKind.ls:
            cache.insert_path(resolution.records, self.kernel.now)
        leaf = resolution.leaf
        return RpcResponse(request_id = request.request_id, inode = leaf.id, version = leaf.version,
                           listing = listing)

    # ---- writes

    def _write(self, request: RpcRequest) -> Generator:
        writer = self.writer
        instance = self.instance
        path = request.path
        if request.op is OpKind.create:
            return (yield from writer.write_single_inode(instance, request.request_id, [path],
                                                         lambda res: self._create(path, res[0]), self._respond))
        if request.op is OpKind.mkdirs:
            return (yield from writer.write_single_inode(instance, request.request_id, [path],
                                                         lambda res: self._mkdirs(path, res[0]), self._respond))
        if request.op is OpKind.chmod:
            perms = request.perms if request.perms is not None else 0o755
            return (yield from writer.write_single_inode(instance, request.request_id, [path],
                                                         lambda res: self._chmod(path, res[0], perms),
                                                         self._respond))
        if request.op is OpKind.delete:
            try:
                return (yield from writer.write_single_inode(instance, request.request_id, [path],
                                                             lambda res: self._delete(path, res[0]), self._respond))
            except DirectoryNotEmpty:
                return (yield from writer.run_subtree_op(instance, request.request_id, SubtreeOpKind.delete, path))
        if request.op is OpKind.mv:
            dst = request.dst
            if dst is None:
                raise InvalidMove(path)
            try:
                return (yield from writer.write_single_inode(instance, request.request_id, [path, dst],
                                                             lambda res: self._move(path, dst, res[0], res[1]),
                                                             self._respond))
            except DirectoryNotEmpty:
                return (yield from writer.run_subtree_op(instance, request.request_id, SubtreeOpKind.mv, path, dst))
        raise ValueError(f"{request.op.value} is not a write")

    def _respond(self, effect: WriteEffect) -> RpcResponse:
        writes = [(record.id, record.version) for record in effect.upserts]
        writes += [(record.id, record.version + 1) for record in effect.deletes]
        result = effect.result
        version = None
        if result is not None:
            version = dict(writes).get(result.id, result.version)
        return RpcResponse(request_id = "", inode = result.id if result else None, version = version,
                           writes = sorted(writes), served_by = self.instance.instance_id)

    def _all(self) -> set[int]:
        return set(range(self.n))

    def _targets(self, record: INodeRecord, path: str) -> set[int]:
        """Files are cached by one deployment; directories may be cached as a path prefix anywhere."""
        return self._all() if record.is_dir else {deployment_for(path, self.n)}

    @staticmethod
    def _parent_of_missing(path: str, resolution: PathResolution) -> INodeRecord:
        if resolution.found:
            raise AlreadyExists(path)
        if resolution.miss_depth < len(components(path)):
            raise FileNotFound(parent_directory(path))
        parent = resolution.records[-1]
        if not parent.is_dir:
            raise NotADirectory(parent_directory(path))
        return parent

    def _create(self, path: str, resolution: PathResolution) -> WriteEffect:
        parent = self._parent_of_missing(path, resolution)
        record = INodeRecord(id = self.store.allocate_id(), parent = parent.id, name = basename(path),
                             kind = INodeKind.file, mtime = self.kernel.now)
        return WriteEffect(upserts = [record], targets = {deployment_for(path, self.n)}, result = record)

    def _mkdirs(self, path: str, resolution: PathResolution) -> WriteEffect:
        if resolution.found:
            if not resolution.leaf.is_dir:
                raise AlreadyExists(path)
            return WriteEffect(result = resolution.leaf)
        parent = resolution.records[-1]
        if not parent.is_dir:
            raise NotADirectory(parent_directory(path))
        parts = components(path)
        current = "/" + "/".join(parts[:resolution.miss_depth - 1]) if resolution.miss_depth > 1 else "/"
        effect = WriteEffect()
        for name in parts[resolution.miss_depth - 1:]:
            current = join(current, name)
            record = INodeRecord(id = self.store.allocate_id(), parent = parent.id, name = name,
                                 kind = INodeKind.directory, mtime = self.kernel.now)
            effect.upserts.append(record)
            effect.targets.add(deployment_for(current, self.n))
            parent = record
        effect.result = parent
        return effect

    def _chmod(self, path: str, resolution: PathResolution, perms: int) -> WriteEffect:
        if not resolution.found:
            raise FileNotFound(path)
        leaf = resolution.leaf
        record = leaf.model_copy(update = {"perms": perms, "version": leaf.version + 1, "mtime": self.kernel.now})
        return WriteEffect(upserts = [record], targets = self._targets(leaf, path), result = record)

    def _delete(self, path: str, resolution: PathResolution) -> WriteEffect:
        if not resolution.found:
            raise FileNotFound(path)
        leaf = resolution.leaf
        if leaf.is_root:
            raise InvalidMove(path)
        if leaf.is_dir and self.store.has_children(leaf.id):
            raise DirectoryNotEmpty(path)
        return WriteEffect(deletes = [leaf], targets = self._targets(leaf, path), result = leaf)

    def _move(self, src: str, dst: str, source: PathResolution, target: PathResolution) -> WriteEffect:
        if not source.found:
            raise FileNotFound(src)
        leaf = source.leaf
        if leaf.is_root or is_prefix(src, dst):
            raise InvalidMove(dst)
        parent = self._parent_of_missing(dst, target)
        if leaf.is_dir and self.store.has_children(leaf.id):
            raise DirectoryNotEmpty(src)
        record = leaf.model_copy(update = {"parent": parent.id, "name": basename(dst), "version": leaf.version + 1,
                                           "mtime": self.kernel.now})
        targets = self._targets(leaf, src) | {deployment_for(dst, self.n)}
        return WriteEffect(upserts = [record], targets = targets, result = record)
