"""In-memory relational store with copy-on-snapshot isolation.

Tables are plain dicts: table name -> record id -> record. Records hold
scalars, lists, and nested maps. All mutation goes through the tool layer
(`agentloop.tools.execute_tool`); code outside this package only sees deep
copies.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
from typing import Any, Dict, Iterator, Mapping, Optional


class StaleSnapshotError(RuntimeError):
    """Raised when restoring from an invalidated snapshot token."""


class Database:
    def __init__(self, tables: Mapping[str, Mapping[str, Any]] | None = None):
        self._tables: Dict[str, Dict[str, Any]] = copy.deepcopy(dict(tables or {}))
        self._version = 0

    @property
    def version(self) -> int:
        return self._version

    def table_names(self) -> list[str]:
        return sorted(self._tables)

    def has_table(self, table: str) -> bool:
        return table in self._tables

    def has_record(self, table: str, record_id: str) -> bool:
        return record_id in self._tables.get(table, {})

    def get_record(self, table: str, record_id: str) -> Any:
        return copy.deepcopy(self._tables[table][record_id])

    def records(self, table: str) -> Iterator[tuple[str, Any]]:
        for rid, rec in self._tables.get(table, {}).items():
            yield rid, copy.deepcopy(rec)

    def tables_copy(self) -> Dict[str, Dict[str, Any]]:
        return copy.deepcopy(self._tables)

    def serialize(self) -> str:
        return json.dumps(self._tables, sort_keys=True, separators=(",", ":"))

    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()

    def deep_equal(self, other: "Database") -> bool:
        return self._tables == other._tables

    def clone(self) -> "Database":
        out = Database(self._tables)
        out._version = self._version
        return out

    def resolve_path(self, dotted: str) -> Any:
        """Resolve `table.record_id.field[.subfield]`; digits index into lists."""
        cur: Any = self._tables
        for part in dotted.split("."):
            if isinstance(cur, list):
                cur = cur[int(part)]
            elif isinstance(cur, dict):
                cur = cur[part]
            else:
                raise KeyError(f"cannot descend into scalar at {part!r} of {dotted!r}")
        return copy.deepcopy(cur)


_token_ids = itertools.count(1)


class SnapshotToken:
    def __init__(self, db: Database):
        self.token_id = next(_token_ids)
        self._tables = copy.deepcopy(db._tables)
        self._version = db._version
        self._valid = True

    @property
    def valid(self) -> bool:
        return self._valid

    def invalidate(self) -> None:
        self._valid = False


def snapshot(db: Database) -> SnapshotToken:
    return SnapshotToken(db)


def restore(token: SnapshotToken) -> Database:
    if not token.valid:
        raise StaleSnapshotError(f"snapshot token {token.token_id} is invalidated")
    out = Database(token._tables)
    out._version = token._version
    return out


def canonical_json(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))
