"""Parse, validate, repair, and summarize CoNLL-like BIO corpora.

File format: tab-separated columns (token, source file, start char, end char,
BIO tag, optional extra columns), blank lines between sentences, UTF-8.

Every character offset in this package is a Unicode code point index,
end-exclusive. Byte offsets would shift between scripts (Latin vs Cyrillic),
code points do not.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

MIN_COLUMNS = 5

_TAG_RE = re.compile(r"^(?:O|[BI]-.+)$")
_TOKEN_RE = re.compile(r"\S+")


class FormatError(ValueError):
    """A corpus file contains structurally invalid lines."""

    def __init__(self, path: str | Path, problems: Sequence[tuple[int, str]]):
        self.path = str(path)
        self.problems = list(problems)
        detail = "; ".join(f"line {n}: {msg}" for n, msg in self.problems)
        super().__init__(f"{self.path}: {detail}")


class InvalidBio(ValueError):
    """A sentence carries BIO violations where a valid sequence is required."""

    def __init__(self, sentence_id: str, violations: Sequence["BioViolation"]):
        self.sentence_id = sentence_id
        self.violations = list(violations)
        super().__init__(
            f"sentence {sentence_id}: {len(self.violations)} BIO violation(s); repair first"
        )


class OverlappingSpans(ValueError):
    def __init__(self, record_id: str, span_ids: Sequence[str]):
        self.record_id = record_id
        self.span_ids = list(span_ids)
        super().__init__(
            f"record {record_id}: overlapping spans {', '.join(self.span_ids)}"
        )


class MissingField(ValueError):
    def __init__(self, field_name: str, where: str = ""):
        self.field_name = field_name
        suffix = f" in {where}" if where else ""
        super().__init__(f"missing field {field_name!r}{suffix}")


class Side(str, Enum):
    """Which language side of a record an operation looks at."""

    SOURCE = "source"
    TARGET = "target"


class ViolationKind(str, Enum):
    I_START = "i-start"
    LABEL_SWITCH_WITHOUT_B = "label-switch-without-b"
    MALFORMED_TAG = "malformed-tag"


@dataclass(frozen=True)
class TokenRow:
    """One corpus line. ``extra_cols`` carries trailing columns opaquely."""

    token: str
    source_file: str
    start_char: int
    end_char: int
    tag: str
    extra_cols: tuple[str, ...] = ()


@dataclass(frozen=True)
class ConllSentence:
    rows: tuple[TokenRow, ...]
    sentence_id: str

    def tags(self) -> tuple[str, ...]:
        return tuple(r.tag for r in self.rows)

    def tokens(self) -> tuple[str, ...]:
        return tuple(r.token for r in self.rows)


@dataclass(frozen=True)
class BioViolation:
    sentence_id: str
    row_index: int
    kind: ViolationKind


@dataclass(frozen=True)
class CharSpan:
    """Half-open labeled interval over some owning text, in code points."""

    start: int
    end: int
    label: str
    span_id: str
    surface: str


@dataclass
class SentenceRecord:
    """JSON-serializable unit of work for the translate/transfer pipeline.

    ``spans`` index into ``text``; ``spans_rus`` index into ``text_rus``.
    Unknown fields read from disk are kept in ``extra`` and written back
    untouched. ``has_definition`` is derived from the source span labels.
    """

    id: str
    text: str
    spans: list[CharSpan] = field(default_factory=list)
    text_rus: str | None = None
    spans_rus: list[CharSpan] | None = None
    has_definition: bool = False
    extra: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LabelStats:
    counts: dict[str, int]
    total_sentences: int
    total_spans: int


@dataclass(frozen=True)
class DuplicateGroup:
    text: str
    member_ids: tuple[str, ...]
    annotations_agree: bool


def definition_flag(spans: Iterable[CharSpan]) -> bool:
    return any(s.label == "Definition" for s in spans)


def parse_conll(path: str | Path) -> list[ConllSentence]:
    """Read one corpus file into sentences.

    Collects every malformed line (too few columns, non-integer offsets) and
    raises a single FormatError listing all of them with line numbers, so a
    broken file is reported in full rather than line by line.
    """
    path = Path(path)
    name = path.name
    sentences: list[ConllSentence] = []
    rows: list[TokenRow] = []
    problems: list[tuple[int, str]] = []

    def flush() -> None:
        nonlocal rows
        if rows:
            sentences.append(
                ConllSentence(rows=tuple(rows), sentence_id=f"{name}#{len(sentences)}")
            )
            rows = []

    with path.open("r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                flush()
                continue
            cols = line.split("\t")
            if len(cols) < MIN_COLUMNS:
                problems.append(
                    (lineno, f"expected at least {MIN_COLUMNS} tab-separated columns, got {len(cols)}")
                )
                continue
            token, source_file, start_raw, end_raw, tag = cols[:MIN_COLUMNS]
            try:
                start_char = int(start_raw)
                end_char = int(end_raw)
            except ValueError:
                problems.append(
                    (lineno, f"non-integer char offsets {start_raw!r}/{end_raw!r}")
                )
                continue
            rows.append(
                TokenRow(
                    token=token,
                    source_file=source_file,
                    start_char=start_char,
                    end_char=end_char,
                    tag=tag,
                    extra_cols=tuple(cols[MIN_COLUMNS:]),
                )
            )
    flush()
    if problems:
        raise FormatError(path, problems)
    return sentences


def write_conll(sentences: Iterable[ConllSentence], path: str | Path) -> int:
    """Emit sentences in the input file format; returns sentences written."""
    count = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        for sentence in sentences:
            if count:
                handle.write("\n")
            for row in sentence.rows:
                cols = [
                    row.token,
                    row.source_file,
                    str(row.start_char),
                    str(row.end_char),
                    row.tag,
                    *row.extra_cols,
                ]
                handle.write("\t".join(cols) + "\n")
            count += 1
    return count


def _split_tag(tag: str) -> tuple[str, str] | None:
    """Return (prefix, label) for a well-formed tag, None for a malformed one."""
    if tag == "O":
        return ("O", "")
    if _TAG_RE.match(tag):
        prefix, label = tag.split("-", 1)
        return (prefix, label)
    return None


def validate_bio(sentence: ConllSentence) -> list[BioViolation]:
    """Report BIO violations; an empty list means the sequence is valid.

    An I-tag is legal only directly after a B or I tag of the same label.
    Malformed tags are reported and treated as O for subsequent checks.
    """
    violations: list[BioViolation] = []
    prev_prefix, prev_label = "O", ""
    for index, row in enumerate(sentence.rows):
        parsed = _split_tag(row.tag)
        if parsed is None:
            violations.append(
                BioViolation(sentence.sentence_id, index, ViolationKind.MALFORMED_TAG)
            )
            prev_prefix, prev_label = "O", ""
            continue
        prefix, label = parsed
        if prefix == "I":
            if prev_prefix == "O":
                violations.append(
                    BioViolation(sentence.sentence_id, index, ViolationKind.I_START)
                )
            elif prev_label != label:
                violations.append(
                    BioViolation(
                        sentence.sentence_id,
                        index,
                        ViolationKind.LABEL_SWITCH_WITHOUT_B,
                    )
                )
        prev_prefix, prev_label = prefix, label
    return violations


def repair_bio(sentence: ConllSentence) -> ConllSentence:
    """Rewrite violating I-tags to B-tags; malformed tags become O.

    Valid sentences are returned unchanged (same object). The result always
    passes validate_bio.
    """
    new_tags: list[str] = []
    changed = False
    prev_prefix, prev_label = "O", ""
    for row in sentence.rows:
        parsed = _split_tag(row.tag)
        if parsed is None:
            new_tags.append("O")
            changed = True
            prev_prefix, prev_label = "O", ""
            continue
        prefix, label = parsed
        if prefix == "I" and (prev_prefix == "O" or prev_label != label):
            new_tags.append(f"B-{label}")
            changed = True
            prev_prefix, prev_label = "B", label
        else:
            new_tags.append(row.tag)
            prev_prefix, prev_label = prefix, label
    if not changed:
        return sentence
    rows = tuple(
        replace(row, tag=tag) for row, tag in zip(sentence.rows, new_tags)
    )
    return ConllSentence(rows=rows, sentence_id=sentence.sentence_id)


def conll_to_record(sentence: ConllSentence) -> SentenceRecord:
    """Detokenize a valid sentence and derive character spans from B/I runs.

    Tokens are joined with single spaces; span offsets are positions in that
    joined text. Raises InvalidBio when the tag sequence is not valid (run
    repair_bio first).
    """
    violations = validate_bio(sentence)
    if violations:
        raise InvalidBio(sentence.sentence_id, violations)

    tokens = sentence.tokens()
    text = " ".join(tokens)
    starts: list[int] = []
    position = 0
    for token in tokens:
        starts.append(position)
        position += len(token) + 1

    spans: list[CharSpan] = []
    open_start: int | None = None
    open_label = ""

    def close(last_index: int) -> None:
        nonlocal open_start
        if open_start is None:
            return
        start = starts[open_start]
        end = starts[last_index] + len(tokens[last_index])
        spans.append(
            CharSpan(
                start=start,
                end=end,
                label=open_label,
                span_id=f"s{len(spans)}",
                surface=text[start:end],
            )
        )
        open_start = None

    for index, row in enumerate(sentence.rows):
        prefix, label = _split_tag(row.tag)  # never None: sentence is valid
        if prefix == "O":
            close(index - 1)
        elif prefix == "B":
            close(index - 1)
            open_start, open_label = index, label
    close(len(tokens) - 1)

    return SentenceRecord(
        id=sentence.sentence_id,
        text=text,
        spans=spans,
        has_definition=definition_flag(spans),
    )


def _side_of(record: SentenceRecord, side: Side) -> tuple[str | None, list[CharSpan] | None]:
    if side is Side.SOURCE:
        return record.text, record.spans
    return record.text_rus, record.spans_rus


def find_overlaps(spans: Sequence[CharSpan]) -> list[str]:
    """Span ids involved in any pairwise interval overlap, in span order."""
    flagged: set[str] = set()
    ordered = sorted(spans, key=lambda s: (s.start, s.end))
    max_end = -1
    max_span: CharSpan | None = None
    for span in ordered:
        if max_span is not None and span.start < max_end:
            flagged.add(span.span_id)
            flagged.add(max_span.span_id)
        if span.end > max_end:
            max_end = span.end
            max_span = span
    return [s.span_id for s in spans if s.span_id in flagged]


def record_to_bio(record: SentenceRecord, side: Side = Side.SOURCE) -> ConllSentence:
    """Whitespace-tokenize one side of a record back into tagged rows.

    A token receives the B-/I- tag of a span when its interval intersects the
    span's interval; the first such token gets B. Spans must not overlap.
    """
    text, spans = _side_of(record, side)
    if text is None:
        raise MissingField("text" if side is Side.SOURCE else "text_rus", record.id)
    if spans is None:
        raise MissingField("spans" if side is Side.SOURCE else "spans_rus", record.id)
    overlapping = find_overlaps(spans)
    if overlapping:
        raise OverlappingSpans(record.id, overlapping)

    ordered = sorted(spans, key=lambda s: (s.start, s.end))
    opened: set[str] = set()
    rows: list[TokenRow] = []
    for match in _TOKEN_RE.finditer(text):
        t_start, t_end = match.span()
        owner = next(
            (s for s in ordered if s.start < t_end and t_start < s.end), None
        )
        if owner is None:
            tag = "O"
        elif owner.span_id in opened:
            tag = f"I-{owner.label}"
        else:
            tag = f"B-{owner.label}"
            opened.add(owner.span_id)
        rows.append(
            TokenRow(
                token=match.group(),
                source_file=record.id,
                start_char=t_start,
                end_char=t_end,
                tag=tag,
            )
        )
    return ConllSentence(rows=tuple(rows), sentence_id=record.id)


def detect_duplicates(records: Sequence[SentenceRecord]) -> list[DuplicateGroup]:
    """Group records whose texts are identical after trimming outer whitespace.

    Only groups of two or more are returned, in order of first appearance.
    A group agrees on annotation when every member carries the same
    (start, end, label) span set relative to the trimmed text.
    """
    by_text: dict[str, list[SentenceRecord]] = {}
    order: list[str] = []
    for record in records:
        key = record.text.strip()
        if key not in by_text:
            by_text[key] = []
            order.append(key)
        by_text[key].append(record)

    groups: list[DuplicateGroup] = []
    for key in order:
        members = by_text[key]
        if len(members) < 2:
            continue
        signatures = set()
        for member in members:
            lead = len(member.text) - len(member.text.lstrip())
            signatures.add(
                tuple(sorted((s.start - lead, s.end - lead, s.label) for s in member.spans))
            )
        groups.append(
            DuplicateGroup(
                text=key,
                member_ids=tuple(m.id for m in members),
                annotations_agree=len(signatures) == 1,
            )
        )
    return groups


def duplicate_count(groups: Iterable[DuplicateGroup]) -> int:
    """Number of redundant copies: sum over groups of (size - 1)."""
    return sum(len(g.member_ids) - 1 for g in groups)


def entity_stats(records: Sequence[SentenceRecord], side: Side = Side.SOURCE) -> LabelStats:
    """Label histogram over the chosen side's spans."""
    counter: Counter[str] = Counter()
    for record in records:
        _, spans = _side_of(record, side)
        for span in spans or []:
            counter[span.label] += 1
    return LabelStats(
        counts=dict(counter),
        total_sentences=len(records),
        total_spans=sum(counter.values()),
    )


def format_label_stats(stats: LabelStats) -> str:
    """Aligned two-column table, most frequent label first."""
    lines = ["Entity name                Count"]
    ordered = sorted(stats.counts.items(), key=lambda kv: (-kv[1], kv[0]))
    for label, count in ordered:
        lines.append(f"{label:<24} {count:>8}")
    lines.append(f"{'total spans':<24} {stats.total_spans:>8}")
    lines.append(f"{'total sentences':<24} {stats.total_sentences:>8}")
    return "\n".join(lines)
