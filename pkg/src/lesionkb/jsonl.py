"""Line-delimited JSON helpers used by every on-disk format in the package."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import FormatViolation, IoFailure


def dumps(obj: Any) -> str:
    # Stable bytes: sorted keys would reorder the template field names, so keep insertion order.
    return json.dumps(obj, ensure_ascii=False, separators=(", ", ": "))


def iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, object)`` for every non-blank line of ``path``."""
    try:
        handle = open(path, encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    with handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatViolation(f"invalid JSON ({exc.msg})", line=lineno, path=str(path)) from exc
            if not isinstance(obj, dict):
                raise FormatViolation("expected a JSON object", line=lineno, path=str(path))
            yield lineno, obj


def write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    path = Path(path)
    count = 0
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            for record in records:
                handle.write(dumps(record))
                handle.write("\n")
                count += 1
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return count
