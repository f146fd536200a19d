"""Content-addressed JSON cache for generated texts and embeddings."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

from ..util import atomic_write_text, content_key


class JsonCache:
    """One JSON file per key under a cache directory; writes are atomic."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> Any | None:
        path = self._path(key)
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)

    def put(self, key: str, obj: Any) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self._path(key), json.dumps(obj, sort_keys=True))


__all__ = ["JsonCache", "content_key"]
