"""
Namespace partitioning: every entry belongs to exactly one of ``n`` function deployments,
chosen by hashing the entry's parent directory path.

The hash is 64-bit FNV-1a over the UTF-8 bytes of the parent path. It is fixed so that
ports in other languages route identically; test vectors live in docs/source/partitioning.rst.
"""
from collections.abc import Iterable

from src.exceptions import MalformedPath
from src.schemas.inode import SubtreeDescription

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    """
    >>> fnv1a_64(b"")
    14695981039346656037
    >>> fnv1a_64(b"a")
    12638187200555641996
    """
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & MASK64
    return h


def stable_hash(text: str) -> int:
    return fnv1a_64(text.encode("utf-8"))


def normalize_path(path: str) -> str:
    """
    The normalize_path function validates a client supplied path and returns its canonical form.
    Only the client boundary calls this; everything behind it sees canonical paths.

    :param path: str: Absolute path, possibly with a trailing slash
    :return: The path without trailing slash ("/" for the root)
    """
    if not path or not path.startswith("/"):
        raise MalformedPath(path, "path must be absolute")
    if path == "/":
        return path
    trimmed = path[:-1] if path.endswith("/") else path
    for part in trimmed[1:].split("/"):
        if part in ("", ".", ".."):
            raise MalformedPath(path, "empty, '.' or '..' component")
    return trimmed


def check_normalized(path: str) -> str:
    if normalize_path(path) != path:
        raise MalformedPath(path, "path is not normalized")
    return path


def components(path: str) -> list[str]:
    check_normalized(path)
    return [] if path == "/" else path[1:].split("/")


def join(parent: str, name: str) -> str:
    return f"/{name}" if parent == "/" else f"{parent}/{name}"


def parent_directory(path: str) -> str:
    check_normalized(path)
    if path == "/":
        return "/"
    head = path.rsplit("/", 1)[0]
    return head or "/"


def basename(path: str) -> str:
    return path.rsplit("/", 1)[1] if path != "/" else ""


def is_prefix(prefix: str, path: str) -> bool:
    """Component-boundary prefix test: "/a" is a prefix of "/a/b" but not of "/ab"."""
    if prefix == "/" or prefix == path:
        return True
    return path.startswith(prefix + "/")


def deployment_for(path: str, n: int) -> int:
    """
    The deployment_for function maps a path to the deployment that caches and serves it.
    Siblings share a parent and therefore always land on the same deployment; the root
    hashes "/" itself.

    :param path: str: Normalized absolute path
    :param n: int: Number of deployments, fixed for the run
    :return: Deployment index in [0, n)
    """
    if n < 1:
        raise ValueError(f"deployment count must be at least 1, got {n}")
    return stable_hash(parent_directory(path)) % n


def children_deployment(directory: str, n: int) -> int:
    """Deployment owning the entries listed under ``directory``."""
    check_normalized(directory)
    return stable_hash(directory) % n


def deployments_for_paths(paths: Iterable[str], n: int) -> set[int]:
    return {deployment_for(path, n) for path in paths}


def deployments_for_subtree(subtree: SubtreeDescription, n: int) -> set[int]:
    if not subtree.nodes:
        raise ValueError("subtree description is empty")
    return deployments_for_paths(subtree.paths(), n)
