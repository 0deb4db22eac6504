"""Line-oriented JSON reading and writing with line-numbered diagnostics."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Iterator


class RecordError(ValueError):
    """A malformed or invalid record in an input file."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


def read_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)``; blank lines are skipped."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(f"invalid JSON ({exc.msg})", str(path), lineno) from None
            if not isinstance(rec, dict):
                raise RecordError("record is not a JSON object", str(path), lineno)
            yield lineno, rec


def dumps(record: Any) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_jsonl(path: str | Path, records: Iterable[Any]) -> int:
    n = 0
    with open(path, "w") as fh:
        for rec in records:
            fh.write(dumps(rec))
            fh.write("\n")
            n += 1
    return n


def check_fields(rec: dict, required: Iterable[str], optional: Iterable[str] = (),
                 strict: bool = False) -> None:
    """Raise :class:`RecordError` for missing (or, if strict, unknown) fields."""
    required = set(required)
    missing = required - rec.keys()
    if missing:
        raise RecordError(f"missing fields {sorted(missing)}")
    if strict:
        unknown = rec.keys() - required - set(optional)
        if unknown:
            raise RecordError(f"unknown fields {sorted(unknown)}")
