"""Key-addressed blob storage: in-memory and filesystem backends."""
from __future__ import annotations

import os
import tempfile
import threading
import time
from pathlib import Path

from .errors import InvalidKey, IoFailure, NoSuchKey


def check_key(key: str) -> None:
    if not isinstance(key, str) or not key:
        raise InvalidKey("key must be a non-empty string")
    if key.startswith("/"):
        raise InvalidKey(f"{key!r}: keys never start with '/'")
    for segment in key.split("/"):
        if segment in ("", ".", ".."):
            raise InvalidKey(f"{key!r}: empty, '.' or '..' segment")
    if "\\" in key or "\0" in key:
        raise InvalidKey(f"{key!r}: illegal character")


class ObjectStore:
    """Interface shared by both backends."""

    def put(self, key: str, blob: bytes) -> None:
        raise NotImplementedError

    def get(self, key: str) -> bytes:
        raise NotImplementedError

    def list_prefix(self, prefix: str) -> list[tuple[str, int]]:
        raise NotImplementedError

    def count_prefix(self, prefix: str) -> int:
        return len(self.list_prefix(prefix))


class MemoryStore(ObjectStore):
    backend = "memory"

    def __init__(self) -> None:
        self._objects: dict[str, tuple[bytes, float]] = {}
        self._lock = threading.Lock()

    def __getstate__(self) -> dict:
        return {"_objects": self._objects}

    def __setstate__(self, state: dict) -> None:
        self._objects = state["_objects"]
        self._lock = threading.Lock()

    def put(self, key: str, blob: bytes) -> None:
        check_key(key)
        with self._lock:
            self._objects[key] = (bytes(blob), time.time())

    def get(self, key: str) -> bytes:
        with self._lock:
            try:
                return self._objects[key][0]
            except KeyError:
                raise NoSuchKey(key) from None

    def list_prefix(self, prefix: str) -> list[tuple[str, int]]:
        with self._lock:
            return sorted((k, len(v[0])) for k, v in self._objects.items() if k.startswith(prefix))


class FilesystemStore(ObjectStore):
    """Stores key ``a/b/c`` at ``root/a/b/c``.

    Writes go to a temp file in the destination directory and are renamed into
    place, so readers never observe a partial blob.
    """

    backend = "filesystem"

    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path_for(self, key: str) -> Path:
        check_key(key)
        return self.root.joinpath(*key.split("/"))

    def key_for(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()

    def put(self, key: str, blob: bytes) -> None:
        path = self.path_for(key)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except OSError as exc:
            raise IoFailure(f"put {key!r}: {exc}") from exc

    def get(self, key: str) -> bytes:
        path = self.path_for(key)
        try:
            return path.read_bytes()
        except (FileNotFoundError, IsADirectoryError, NotADirectoryError):
            raise NoSuchKey(key) from None
        except OSError as exc:
            raise IoFailure(f"get {key!r}: {exc}") from exc

    def list_prefix(self, prefix: str) -> list[tuple[str, int]]:
        # Walk only the deepest directory that the prefix pins down.
        head = prefix.rsplit("/", 1)[0] if "/" in prefix else ""
        start = self.root.joinpath(*head.split("/")) if head else self.root
        if not start.is_dir():
            return []
        out = []
        for dirpath, _dirs, files in os.walk(start):
            for name in files:
                if name.startswith(".tmp-"):
                    continue
                full = Path(dirpath) / name
                key = self.key_for(full)
                if key.startswith(prefix):
                    try:
                        out.append((key, full.stat().st_size))
                    except FileNotFoundError:
                        continue
        out.sort()
        return out
