"""Line-delimited JSON persistence for records, plus the resume ledger.

Record files hold one JSON object per line with the field names used on the
LLM wire format: id, text, spans, text_rus, spans_rus. Spans serialize as
5-element lists [start, end, label, id, surface]. Unknown fields survive a
read/write cycle untouched.

The ledger tracks which record ids are finished and which have failed (and
how often), so a multi-day batch can be killed and resumed without paying
for completed work again. Every mutation rewrites the ledger through a
temp-file-plus-rename, so a crash never leaves a torn file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import CharSpan, MissingField, SentenceRecord, definition_flag

DEFAULT_MAX_ATTEMPTS = 5

_KNOWN_FIELDS = {"id", "text", "spans", "text_rus", "spans_rus", "has_definition"}


class ParseError(ValueError):
    def __init__(self, path: str | Path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class DuplicateId(ValueError):
    def __init__(self, record_id: str):
        self.record_id = record_id
        super().__init__(f"duplicate record id {record_id!r}")


def span_to_list(span: CharSpan) -> list:
    return [span.start, span.end, span.label, span.span_id, span.surface]


def _span_from_list(item: object, owner_text: str, path: str, line_no: int) -> CharSpan:
    if not isinstance(item, (list, tuple)) or len(item) != 5:
        raise ParseError(path, line_no, f"span must be a 5-element list, got {item!r}")
    start, end, label, span_id, surface = item
    if not isinstance(start, int) or not isinstance(end, int):
        raise ParseError(path, line_no, f"span offsets must be integers, got {item!r}")
    span = CharSpan(start=start, end=end, label=str(label), span_id=str(span_id), surface=str(surface))
    if owner_text[start:end] != span.surface:
        raise ParseError(
            path,
            line_no,
            f"span {span.span_id} surface {span.surface!r} does not equal text slice [{start}:{end}]",
        )
    return span


def record_to_json(record: SentenceRecord) -> dict:
    obj: dict = {"id": record.id, "text": record.text}
    obj["spans"] = [span_to_list(s) for s in record.spans]
    if record.text_rus is not None:
        obj["text_rus"] = record.text_rus
    if record.spans_rus is not None:
        obj["spans_rus"] = [span_to_list(s) for s in record.spans_rus]
    obj["has_definition"] = record.has_definition
    for key, value in record.extra.items():
        if key not in _KNOWN_FIELDS:
            obj[key] = value
    return obj


def record_from_json(obj: dict, path: str = "<memory>", line_no: int = 0) -> SentenceRecord:
    for required in ("id", "text"):
        if required not in obj:
            raise MissingField(required, f"{path}:{line_no}")
    text = obj["text"]
    spans = [_span_from_list(item, text, path, line_no) for item in obj.get("spans", [])]
    text_rus = obj.get("text_rus")
    spans_rus = None
    if "spans_rus" in obj:
        spans_rus = [
            _span_from_list(item, text_rus or "", path, line_no)
            for item in obj["spans_rus"]
        ]
    extra = {k: v for k, v in obj.items() if k not in _KNOWN_FIELDS}
    return SentenceRecord(
        id=str(obj["id"]),
        text=text,
        spans=spans,
        text_rus=text_rus,
        spans_rus=spans_rus,
        has_definition=definition_flag(spans),
        extra=extra,
    )


def write_jsonl(path: str | Path, records: Iterable[SentenceRecord]) -> int:
    """Write records one JSON object per line (atomic rewrite); returns count."""
    path = Path(path)
    seen: set[str] = set()
    lines: list[str] = []
    for record in records:
        if record.id in seen:
            raise DuplicateId(record.id)
        seen.add(record.id)
        lines.append(json.dumps(record_to_json(record), ensure_ascii=False))
    _atomic_write(path, "".join(line + "\n" for line in lines))
    return len(lines)


def read_jsonl(path: str | Path) -> list[SentenceRecord]:
    path = Path(path)
    records: list[SentenceRecord] = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise ParseError(path, line_no, "line is not a JSON object")
            records.append(record_from_json(obj, str(path), line_no))
    return records


def _atomic_write(path: Path, content: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8", newline="\n") as handle:
        handle.write(content)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp, path)


@dataclass
class FailureInfo:
    attempts: int
    last_error: str


@dataclass
class Ledger:
    """Per-record completion state, persisted after every mutation."""

    path: Path
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    done_ids: set[str] = field(default_factory=set)
    failures: dict[str, FailureInfo] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path, max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> "Ledger":
        ledger = cls(path=Path(path), max_attempts=max_attempts)
        if not ledger.path.exists():
            return ledger
        with ledger.path.open("r", encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(path, line_no, f"invalid JSON: {exc.msg}") from exc
                record_id = str(obj["id"])
                if obj.get("status") == "done":
                    ledger.done_ids.add(record_id)
                    ledger.failures.pop(record_id, None)
                else:
                    ledger.failures[record_id] = FailureInfo(
                        attempts=int(obj.get("attempts", 1)),
                        last_error=str(obj.get("error", "")),
                    )
        return ledger

    def is_done(self, record_id: str) -> bool:
        return record_id in self.done_ids

    def is_exhausted(self, record_id: str) -> bool:
        info = self.failures.get(record_id)
        return info is not None and info.attempts >= self.max_attempts

    def mark_done(self, record_id: str) -> None:
        """Idempotent; clears any failure history for the id."""
        if record_id in self.done_ids:
            return
        self.done_ids.add(record_id)
        self.failures.pop(record_id, None)
        self.save()

    def mark_failed(self, record_id: str, error: str) -> None:
        info = self.failures.get(record_id)
        attempts = min((info.attempts if info else 0) + 1, self.max_attempts)
        self.failures[record_id] = FailureInfo(attempts=attempts, last_error=error)
        self.save()

    def save(self) -> None:
        lines = []
        for record_id in sorted(self.done_ids):
            lines.append(json.dumps({"id": record_id, "status": "done"}, ensure_ascii=False))
        for record_id in sorted(self.failures):
            info = self.failures[record_id]
            lines.append(
                json.dumps(
                    {
                        "id": record_id,
                        "status": "failed",
                        "attempts": info.attempts,
                        "error": info.last_error,
                    },
                    ensure_ascii=False,
                )
            )
        _atomic_write(self.path, "".join(line + "\n" for line in lines))


def pending(records: Sequence[SentenceRecord], ledger: Ledger) -> list[SentenceRecord]:
    """Records still needing work: neither done nor failure-exhausted, in order."""
    return [
        r
        for r in records
        if not ledger.is_done(r.id) and not ledger.is_exhausted(r.id)
    ]
