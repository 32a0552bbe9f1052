from __future__ import annotations

import itertools
from dataclasses import dataclass


@dataclass(frozen=True)
class KvEntry:
    value: bytes
    generation: int
    seq: int


class KvStore:
    """Append-only key/value history. ``query`` returns the newest entry."""

    def __init__(self):
        self._data: dict[str, list[KvEntry]] = {}
        self._seq = itertools.count(1)

    def publish(self, key: str, value: bytes, generation: int = 0) -> int:
        seq = next(self._seq)
        self._data.setdefault(key, []).append(KvEntry(bytes(value), generation, seq))
        return seq

    def query(self, key: str) -> KvEntry | None:
        entries = self._data.get(key)
        return entries[-1] if entries else None

    def history(self, key: str) -> list[KvEntry]:
        return list(self._data.get(key, ()))

    def keys(self, prefix: str = "") -> list[str]:
        return sorted(k for k in self._data if k.startswith(prefix))

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)
