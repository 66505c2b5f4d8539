"""Scoring: five-way span-match classification, corpus BLEU, and
embedding-based translation comparison through an external encoder endpoint.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol, Sequence

import requests

from .corpus import CharSpan, SentenceRecord

_BLEU_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class LengthMismatch(ValueError):
    pass


class EmptyCorpus(ValueError):
    pass


class DimMismatch(ValueError):
    pass


class ZeroVector(ValueError):
    pass


class DimInconsistent(ValueError):
    pass


class IdCollision(ValueError):
    def __init__(self, record_id: str, where: str):
        self.record_id = record_id
        super().__init__(f"duplicate record id {record_id!r} in {where}")


class MatchClass(str, Enum):
    EXACT = "exact"
    WIDER = "wider"
    NARROWER = "narrower"
    MISMATCH = "mismatch"
    UNHANDLED = "unhandled"


def classify_match(gold: CharSpan, sys: CharSpan | None) -> MatchClass:
    """Compare a transferred span's interval against the gold interval.

    Exact: same endpoints. Wider: the system span strictly contains the gold
    one. Narrower: strictly contained in it. Everything else that was
    produced at all (partial overlap, disjoint) counts as a mismatch; an
    absent system span is unhandled.
    """
    if sys is None:
        return MatchClass.UNHANDLED
    if (sys.start, sys.end) == (gold.start, gold.end):
        return MatchClass.EXACT
    if sys.start <= gold.start and gold.end <= sys.end:
        return MatchClass.WIDER
    if gold.start <= sys.start and sys.end <= gold.end:
        return MatchClass.NARROWER
    return MatchClass.MISMATCH


_COUNTER_KEYS = ("exact", "wider", "narrower", "mismatched", "unhandled")


@dataclass
class MatchCounters:
    exact: int = 0
    wider: int = 0
    narrower: int = 0
    mismatched: int = 0
    unhandled: int = 0

    def add(self, cls: MatchClass) -> None:
        if cls is MatchClass.EXACT:
            self.exact += 1
        elif cls is MatchClass.WIDER:
            self.wider += 1
        elif cls is MatchClass.NARROWER:
            self.narrower += 1
        elif cls is MatchClass.MISMATCH:
            self.mismatched += 1
        else:
            self.unhandled += 1

    @property
    def spans_checked(self) -> int:
        """Handled spans only; by definition the sum of the four categories."""
        return self.exact + self.wider + self.narrower + self.mismatched

    def to_json(self) -> dict:
        return {
            "exact": self.exact,
            "wider": self.wider,
            "narrower": self.narrower,
            "mismatched": self.mismatched,
            "unhandled": self.unhandled,
            "spans_checked": self.spans_checked,
        }


@dataclass
class TransferReport:
    total_entries: int = 0
    totals: MatchCounters = field(default_factory=MatchCounters)
    per_label: dict[str, MatchCounters] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "total_entries": self.total_entries,
            **self.totals.to_json(),
            "per_label": {
                label: self.per_label[label].to_json()
                for label in sorted(self.per_label)
            },
        }

    def format_table(self) -> str:
        rows = [
            ("Total Entries", self.total_entries),
            ("Exact Match", self.totals.exact),
            ("Wider Match", self.totals.wider),
            ("Narrower Match", self.totals.narrower),
            ("Mismatched", self.totals.mismatched),
            ("Spans Checked", self.totals.spans_checked),
            ("Unhandled", self.totals.unhandled),
        ]
        return "\n".join(f"{name:<16} {value:>8}" for name, value in rows)


def _index_by_id(records: Sequence[SentenceRecord], where: str) -> dict[str, SentenceRecord]:
    indexed: dict[str, SentenceRecord] = {}
    for record in records:
        if record.id in indexed:
            raise IdCollision(record.id, where)
        indexed[record.id] = record
    return indexed


def transfer_report(
    gold: Sequence[SentenceRecord], sys: Sequence[SentenceRecord]
) -> TransferReport:
    """Aggregate classify_match over target-side spans paired by record id
    and span id. Gold spans with no system counterpart count as unhandled.
    """
    gold_by_id = _index_by_id(gold, "gold")
    sys_by_id = _index_by_id(sys, "system")

    report = TransferReport()
    for record_id, gold_record in gold_by_id.items():
        gold_spans = gold_record.spans_rus or []
        if not gold_spans:
            continue
        report.total_entries += 1
        sys_record = sys_by_id.get(record_id)
        sys_spans = {s.span_id: s for s in (sys_record.spans_rus or [])} if sys_record else {}
        for gold_span in gold_spans:
            cls = classify_match(gold_span, sys_spans.get(gold_span.span_id))
            report.totals.add(cls)
            report.per_label.setdefault(gold_span.label, MatchCounters()).add(cls)
    return report


def bleu_tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, detach punctuation as its own tokens."""
    return _BLEU_TOKEN_RE.findall(text.lower())


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    candidates: Sequence[str],
    references: Sequence[str],
    max_n: int = 4,
    smooth: bool = False,
) -> float:
    """Corpus BLEU on a 0-1 scale, one reference per candidate.

    Geometric mean of modified n-gram precisions for n = 1..max_n, times the
    brevity penalty exp(min(0, 1 - ref_len/cand_len)). Without smoothing any
    zero precision zeroes the score; with ``smooth`` the n >= 2 precisions
    get add-one smoothing. An order whose denominator is zero (every sentence
    shorter than n tokens) is vacuous and contributes a precision of 1, so
    identical corpora always score exactly 1.0.
    """
    if len(candidates) != len(references):
        raise LengthMismatch(
            f"{len(candidates)} candidates vs {len(references)} references"
        )
    if not candidates:
        raise EmptyCorpus("cannot score an empty corpus")

    clipped = [0] * max_n
    totals = [0] * max_n
    cand_len = 0
    ref_len = 0
    for candidate, reference in zip(candidates, references):
        cand_tokens = bleu_tokenize(candidate)
        ref_tokens = bleu_tokenize(reference)
        cand_len += len(cand_tokens)
        ref_len += len(ref_tokens)
        for n in range(1, max_n + 1):
            cand_counts = _ngram_counts(cand_tokens, n)
            ref_counts = _ngram_counts(ref_tokens, n)
            clipped[n - 1] += sum(
                min(count, ref_counts[gram]) for gram, count in cand_counts.items()
            )
            totals[n - 1] += sum(cand_counts.values())

    log_sum = 0.0
    for n in range(1, max_n + 1):
        numerator, denominator = clipped[n - 1], totals[n - 1]
        if smooth and n >= 2:
            numerator, denominator = numerator + 1, denominator + 1
        if denominator == 0:
            continue
        if numerator == 0:
            return 0.0
        log_sum += math.log(numerator / denominator)
    if cand_len == 0:
        return 1.0 if ref_len == 0 else 0.0
    brevity = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return brevity * math.exp(log_sum / max_n)


def cosine_distance(u: Sequence[float], v: Sequence[float]) -> float:
    """1 - cos(u, v); lies in [0, 2]."""
    if len(u) != len(v):
        raise DimMismatch(f"dims {len(u)} vs {len(v)}")
    norm_u = math.sqrt(sum(x * x for x in u))
    norm_v = math.sqrt(sum(x * x for x in v))
    if norm_u == 0.0 or norm_v == 0.0:
        raise ZeroVector("cosine distance undefined for zero vectors")
    dot = sum(x * y for x, y in zip(u, v))
    return 1.0 - dot / (norm_u * norm_v)


def euclidean_distance(u: Sequence[float], v: Sequence[float]) -> float:
    if len(u) != len(v):
        raise DimMismatch(f"dims {len(u)} vs {len(v)}")
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(u, v)))


def _distance_fn(metric: str) -> Callable[[Sequence[float], Sequence[float]], float]:
    if metric == "cosine":
        return cosine_distance
    if metric == "euclidean":
        return euclidean_distance
    raise ValueError(f"unknown distance metric {metric!r}")


def bleu_like_metric(
    gold_embeddings: Sequence[Sequence[float]],
    sys_embeddings: Sequence[Sequence[float]],
    metric: str = "cosine",
) -> float:
    """Mean embedding distance between paired gold and system translations.

    Zero means the system texts embed exactly where the gold ones do; the
    smaller the value, the closer the meaning.
    """
    if len(gold_embeddings) != len(sys_embeddings):
        raise LengthMismatch(
            f"{len(gold_embeddings)} gold vs {len(sys_embeddings)} system embeddings"
        )
    if not gold_embeddings:
        raise EmptyCorpus("no embedding pairs")
    distance = _distance_fn(metric)
    return sum(distance(g, s) for g, s in zip(gold_embeddings, sys_embeddings)) / len(
        gold_embeddings
    )


def parallel_comparison(
    source_embeddings: Sequence[Sequence[float]],
    gold_embeddings: Sequence[Sequence[float]],
    sys_embeddings: Sequence[Sequence[float]],
    metric: str = "cosine",
) -> float:
    """mean d(source, gold) - mean d(source, system), paired by position.

    Sign convention: positive means system translations sit closer to the
    source than gold ones do, negative means farther; near zero means the
    system translations are as faithful as the gold ones.
    """
    if not (len(source_embeddings) == len(gold_embeddings) == len(sys_embeddings)):
        raise LengthMismatch(
            f"{len(source_embeddings)}/{len(gold_embeddings)}/{len(sys_embeddings)} embeddings"
        )
    if not source_embeddings:
        raise EmptyCorpus("no embedding triples")
    distance = _distance_fn(metric)
    gold_mean = sum(
        distance(e, g) for e, g in zip(source_embeddings, gold_embeddings)
    ) / len(source_embeddings)
    sys_mean = sum(
        distance(e, s) for e, s in zip(source_embeddings, sys_embeddings)
    ) / len(source_embeddings)
    return gold_mean - sys_mean


@dataclass(frozen=True)
class TranslationScores:
    bleu: float
    bleu_like: float | None = None
    parallel_comparison: float | None = None

    def to_json(self) -> dict:
        return {
            "bleu": round(self.bleu, 4),
            "bleu_like": None if self.bleu_like is None else round(self.bleu_like, 4),
            "parallel_comparison": (
                None
                if self.parallel_comparison is None
                else round(self.parallel_comparison, 4)
            ),
        }

    def format_table(self) -> str:
        def fmt(value: float | None) -> str:
            return "    n/a" if value is None else f"{value:7.4f}"

        lines = [
            f"{'BLEU':<22} {fmt(self.bleu)}",
            f"{'BLEU-like':<22} {fmt(self.bleu_like)}",
            f"{'Parallel comparison':<22} {fmt(self.parallel_comparison)}",
            "(parallel sign: mean d(source, gold) - mean d(source, system))",
        ]
        return "\n".join(lines)


class EmbeddingEndpoint(Protocol):
    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]: ...


@dataclass(frozen=True)
class EmbeddingConfig:
    base_url: str
    model: str
    api_key: str | None = None
    batch_size: int = 32
    timeout_s: float = 120.0


class HttpEmbeddingEndpoint:
    """Client for an OpenAI-compatible /embeddings server."""

    def __init__(self, config: EmbeddingConfig, session: requests.Session | None = None):
        self.config = config
        self._session = session or requests.Session()

    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        url = self.config.base_url.rstrip("/") + "/embeddings"
        headers = {}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        response = self._session.post(
            url,
            json={"model": self.config.model, "input": list(texts)},
            headers=headers,
            timeout=self.config.timeout_s,
        )
        response.raise_for_status()
        body = response.json()
        data = sorted(body["data"], key=lambda item: item.get("index", 0))
        return [item["embedding"] for item in data]


class MockEmbeddingEndpoint:
    """Deterministic offline embedder: a hash of the text, spread over dims."""

    def __init__(self, dim: int = 16):
        self.dim = dim
        self.requests = 0

    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        import hashlib

        self.requests += 1
        vectors = []
        for text in texts:
            digest = hashlib.blake2b(text.encode("utf-8"), digest_size=self.dim).digest()
            vectors.append([(b - 127.5) / 128.0 + 1e-3 for b in digest])
        return vectors


def embed(
    endpoint: EmbeddingEndpoint, texts: Sequence[str], batch_size: int = 32
) -> list[list[float]]:
    """Embed texts in order, batching requests. Empty input makes no requests."""
    vectors: list[list[float]] = []
    for offset in range(0, len(texts), batch_size):
        vectors.extend(endpoint.embed_batch(texts[offset : offset + batch_size]))
    dims = {len(v) for v in vectors}
    if len(dims) > 1:
        raise DimInconsistent(f"service returned mixed dims {sorted(dims)}")
    return vectors


def report_to_json_text(report: TransferReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True, ensure_ascii=False)
