"""On-disk cache: one file per (namespace, key).

Layout is ``<root>/<namespace>/<sha256(key)>.entry``. Each entry file starts
with a single JSON metadata line (always containing ``"key"``) followed by the
cached body verbatim, so entries stay inspectable and diff-able. Writes go
through a per-key lock plus an atomic rename, so concurrent workers never
observe torn files.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path


@dataclass
class CacheEntry:
    metadata: dict
    body: str


def _digest(key: str) -> str:
    return hashlib.sha256(key.encode("utf-8")).hexdigest()


class FileCache:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_guard = threading.Lock()

    def _lock_for(self, path: Path) -> threading.Lock:
        with self._locks_guard:
            return self._locks[str(path)]

    def path_for(self, namespace: str, key: str) -> Path:
        return self.root / namespace / (_digest(key) + ".entry")

    def get(self, namespace: str, key: str) -> CacheEntry | None:
        path = self.path_for(namespace, key)
        if not path.exists():
            return None
        raw = path.read_text(encoding="utf-8")
        header, _, body = raw.partition("\n")
        metadata = json.loads(header)
        return CacheEntry(metadata=metadata, body=body)

    def put(self, namespace: str, key: str, metadata: dict, body: str) -> Path:
        path = self.path_for(namespace, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = json.dumps({"key": key, **metadata}, ensure_ascii=False, sort_keys=True)
        payload = header + "\n" + body
        lock = self._lock_for(path)
        with lock:
            tmp = path.with_suffix(".tmp-%d" % os.getpid())
            tmp.write_text(payload, encoding="utf-8")
            os.replace(tmp, path)
        return path
