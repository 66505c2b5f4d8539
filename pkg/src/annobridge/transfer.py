"""Resolve model-claimed target-language surfaces into character spans.

Exact substring search runs first. When it misses (the model often repairs an
inflection ending, so the claimed surface differs slightly from the actual
translated text), an optional fuzzy pass scans word-boundary-aligned windows
of the text and picks the one with the lowest normalized edit distance.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

from .corpus import CharSpan, MissingField, SentenceRecord
from .llm import (
    ChatEndpoint,
    PromptName,
    PromptTemplate,
    RawRusSpan,
    RetryPolicy,
    chat,
    extract_json,
    render_prompt,
    transfer_validator,
    translation_validator,
    validate_transfer_response,
    validate_translation_response,
)

_WORD_RE = re.compile(r"\S+")


class OccurrencePolicy(str, Enum):
    """How repeated identical surfaces bind to repeated occurrences."""

    ORDERED_CURSOR = "ordered-cursor"
    LEFTMOST = "leftmost"


class ResolveMethod(str, Enum):
    EXACT = "exact"
    FUZZY = "fuzzy"


@dataclass(frozen=True)
class TransferConfig:
    fuzzy_threshold: float = 0.25
    fuzzy_enabled: bool = True
    occurrence_policy: OccurrencePolicy = OccurrencePolicy.ORDERED_CURSOR

    def __post_init__(self):
        if not 0 <= self.fuzzy_threshold < 1:
            raise ValueError(f"fuzzy_threshold must be in [0, 1), got {self.fuzzy_threshold}")


@dataclass(frozen=True)
class ResolvedSpan:
    span: CharSpan
    method: ResolveMethod
    fuzzy_score: float | None = None
    overlapping: bool = False


@dataclass(frozen=True)
class UnresolvedSpan:
    span_id: str
    label: str
    surface: str
    reason: str
    best_score: float | None = None


def locate_exact(haystack: str, needle: str, cursor: int = 0) -> tuple[int, int] | None:
    """Leftmost occurrence of needle at or after cursor, in code points."""
    index = haystack.find(needle, cursor)
    if index == -1:
        return None
    return (index, index + len(needle))


def levenshtein(a: str, b: str) -> int:
    """Minimal insert/delete/substitute edit distance over code points."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        current = [i]
        for j, cb in enumerate(b, 1):
            current.append(
                min(
                    previous[j] + 1,
                    current[j - 1] + 1,
                    previous[j - 1] + (ca != cb),
                )
            )
        previous = current
    return previous[-1]


def _levenshtein_capped(a: str, b: str, cap: int) -> int | None:
    """Edit distance, or None once it provably exceeds ``cap``."""
    if abs(len(a) - len(b)) > cap:
        return None
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a) if len(a) <= cap else None
    previous = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        current = [i]
        row_min = i
        for j, cb in enumerate(b, 1):
            value = min(
                previous[j] + 1,
                current[j - 1] + 1,
                previous[j - 1] + (ca != cb),
            )
            current.append(value)
            row_min = min(row_min, value)
        if row_min > cap:
            return None
        previous = current
    return previous[-1] if previous[-1] <= cap else None


def _word_boundaries(text: str) -> list[tuple[int, int]]:
    return [m.span() for m in _WORD_RE.finditer(text)]


def best_fuzzy_window(
    haystack: str, needle: str, threshold: float
) -> tuple[tuple[int, int], float] | None:
    """Lowest-scoring word-aligned window, whether or not it beats the threshold.

    Candidate windows start and end on word boundaries and have a code-point
    length within ±ceil(threshold * |needle|) of the needle's. The score is
    levenshtein(window, needle) / max(|window|, |needle|). Ties break toward
    the lower score, then the leftmost window, then the shortest.
    """
    if not needle:
        return None
    words = _word_boundaries(haystack)
    if not words:
        return None
    slack = math.ceil(threshold * len(needle))
    low, high = len(needle) - slack, len(needle) + slack

    best: tuple[float, int, int] | None = None  # (score, start, end)
    for i, (start, _) in enumerate(words):
        for j in range(i, len(words)):
            end = words[j][1]
            length = end - start
            if length > high:
                break
            if length < low:
                continue
            window = haystack[start:end]
            denom = max(length, len(needle))
            # a window can only win with distance <= floor(best_score * denom)
            cap = denom if best is None else min(denom, math.floor(best[0] * denom))
            distance = _levenshtein_capped(window, needle, cap)
            if distance is None:
                continue
            score = distance / denom
            key = (score, start, end)
            if best is None or key < best:
                best = key
    if best is None:
        return None
    score, start, end = best
    return ((start, end), score)


def fuzzy_locate(
    haystack: str, needle: str, threshold: float
) -> tuple[tuple[int, int], float] | None:
    """Best word-aligned window whose normalized distance is <= threshold."""
    found = best_fuzzy_window(haystack, needle, threshold)
    if found is None or found[1] > threshold:
        return None
    return found


def resolve_spans(
    record: SentenceRecord,
    raws: Sequence[RawRusSpan],
    config: TransferConfig = TransferConfig(),
) -> tuple[list[ResolvedSpan], list[UnresolvedSpan]]:
    """Bind each claimed surface to an interval of the record's translated text.

    Under the ordered-cursor policy the k-th occurrence of an identical
    surface binds the k-th occurrence in the text: after each hit the search
    cursor for that surface advances past it, and the fuzzy fallback searches
    from the same cursor. Failures are returned, never raised, so one bad
    span cannot sink the rest of the record.
    """
    text = record.text_rus
    if text is None:
        raise MissingField("text_rus", record.id)

    cursors: dict[str, int] = {}
    resolved: list[ResolvedSpan] = []
    unresolved: list[UnresolvedSpan] = []

    for raw in raws:
        cursor = (
            cursors.get(raw.surface, 0)
            if config.occurrence_policy is OccurrencePolicy.ORDERED_CURSOR
            else 0
        )
        hit = locate_exact(text, raw.surface, cursor)
        if hit is not None:
            start, end = hit
            resolved.append(
                ResolvedSpan(
                    span=CharSpan(start, end, raw.label, raw.span_id, text[start:end]),
                    method=ResolveMethod.EXACT,
                )
            )
            cursors[raw.surface] = end
            continue
        if not config.fuzzy_enabled:
            unresolved.append(
                UnresolvedSpan(raw.span_id, raw.label, raw.surface, reason="not-found")
            )
            continue
        found = best_fuzzy_window(text[cursor:], raw.surface, config.fuzzy_threshold)
        if found is None:
            unresolved.append(
                UnresolvedSpan(raw.span_id, raw.label, raw.surface, reason="no-candidate-window")
            )
            continue
        (start, end), score = found
        start, end = start + cursor, end + cursor
        if score > config.fuzzy_threshold:
            unresolved.append(
                UnresolvedSpan(
                    raw.span_id,
                    raw.label,
                    raw.surface,
                    reason="best-window-above-threshold",
                    best_score=score,
                )
            )
            continue
        resolved.append(
            ResolvedSpan(
                span=CharSpan(start, end, raw.label, raw.span_id, text[start:end]),
                method=ResolveMethod.FUZZY,
                fuzzy_score=score,
            )
        )
        cursors[raw.surface] = end

    return _flag_overlaps(resolved), unresolved


def _flag_overlaps(resolved: list[ResolvedSpan]) -> list[ResolvedSpan]:
    """Mark members of overlapping pairs; kept, not dropped, so scoring sees them."""
    flagged = [False] * len(resolved)
    for i in range(len(resolved)):
        for j in range(i + 1, len(resolved)):
            a, b = resolved[i].span, resolved[j].span
            if a.start < b.end and b.start < a.end:
                flagged[i] = flagged[j] = True
    return [
        replace(r, overlapping=True) if flag else r
        for r, flag in zip(resolved, flagged)
    ]


def unresolved_to_json(record_id: str, spans: Sequence[UnresolvedSpan]) -> list[dict]:
    return [
        {
            "record_id": record_id,
            "span_id": u.span_id,
            "reason": u.reason,
            "needle": u.surface,
            "best_score": u.best_score,
        }
        for u in spans
    ]


def transfer_record(
    record: SentenceRecord,
    endpoint: ChatEndpoint,
    templates: dict[PromptName, PromptTemplate],
    config: TransferConfig = TransferConfig(),
    policy: RetryPolicy = RetryPolicy(),
    translate_with: PromptName | None = None,
) -> SentenceRecord:
    """Run one record through the prompt/chat/validate/resolve chain.

    The record must already carry its translation unless ``translate_with``
    names a translation template to apply first. Unresolved spans land in the
    record's ``unresolved_spans`` diagnostics field.
    """
    if not record.spans:
        raise ValueError(f"record {record.id} has no spans to transfer")
    working = record
    if working.text_rus is None:
        if translate_with is None:
            raise MissingField("text_rus", record.id)
        working = translate_record(working, endpoint, templates[translate_with], policy)

    template = templates[PromptName.TRANSFER_SPANS]
    exchange = render_prompt(template, working)
    effective = replace(policy, validator=transfer_validator(working))
    completed = chat(endpoint, exchange, effective)
    raws = validate_transfer_response(working, extract_json(completed.raw_response or ""))
    resolved, unresolved = resolve_spans(working, raws, config)

    extra = dict(working.extra)
    if unresolved:
        extra["unresolved_spans"] = unresolved_to_json(working.id, unresolved)
    else:
        extra.pop("unresolved_spans", None)
    return replace(
        working,
        spans_rus=[r.span for r in resolved],
        extra=extra,
    )


def translate_record(
    record: SentenceRecord,
    endpoint: ChatEndpoint,
    template: PromptTemplate,
    policy: RetryPolicy = RetryPolicy(),
) -> SentenceRecord:
    """Fill text_rus by prompting the chat endpoint."""
    exchange = render_prompt(template, record)
    effective = replace(policy, validator=translation_validator(record))
    completed = chat(endpoint, exchange, effective)
    text_rus = validate_translation_response(
        record, extract_json(completed.raw_response or "")
    )
    return replace(record, text_rus=text_rus)
