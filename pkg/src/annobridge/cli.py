"""Command-line pipeline: convert -> audit -> translate -> transfer -> evaluate -> export.

Stages are separate subcommands so a multi-day batch can be stopped,
inspected, and resumed at any boundary. Exit codes are a stable contract:
0 success, 1 input or configuration error, 2 partial batch failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import sys
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

from . import corpus as corpus_mod
from . import llm as llm_mod
from . import metrics as metrics_mod
from . import records as records_mod
from . import transfer as transfer_mod
from .corpus import SentenceRecord, Side
from .llm import PromptName, RetryPolicy
from .metrics import EmbeddingConfig
from .records import Ledger, pending, read_jsonl, write_jsonl
from .transfer import TransferConfig

log = logging.getLogger("annobridge")

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_PARTIAL_FAILURE = 2


@dataclass
class PipelineConfig:
    chat: llm_mod.EndpointConfig | None = None
    embedding: EmbeddingConfig | None = None
    template: PromptName = PromptName.TRANSLATE_1
    transfer: TransferConfig = field(default_factory=TransferConfig)
    workers: int = 1
    max_attempts: int = records_mod.DEFAULT_MAX_ATTEMPTS
    backoff_base: float = 0.5

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
        config = cls()
        if "chat" in raw:
            config.chat = llm_mod.EndpointConfig(
                base_url=raw["chat"]["base_url"],
                model=raw["chat"]["model"],
                api_key=os.environ.get(llm_mod.API_KEY_ENV),
                timeout_s=float(raw["chat"].get("timeout_s", llm_mod.DEFAULT_TIMEOUT_S)),
            )
        if "embedding" in raw:
            config.embedding = EmbeddingConfig(
                base_url=raw["embedding"]["base_url"],
                model=raw["embedding"]["model"],
                api_key=os.environ.get(llm_mod.API_KEY_ENV),
                batch_size=int(raw["embedding"].get("batch_size", 32)),
                timeout_s=float(raw["embedding"].get("timeout_s", 120.0)),
            )
        if "template" in raw:
            config.template = PromptName(raw["template"])
        if "transfer" in raw:
            section = raw["transfer"]
            config.transfer = TransferConfig(
                fuzzy_threshold=float(section.get("fuzzy_threshold", 0.25)),
                fuzzy_enabled=bool(section.get("fuzzy_enabled", True)),
                occurrence_policy=transfer_mod.OccurrencePolicy(
                    section.get("occurrence_policy", "ordered-cursor")
                ),
            )
        config.workers = int(raw.get("workers", 1))
        config.max_attempts = int(raw.get("max_attempts", records_mod.DEFAULT_MAX_ATTEMPTS))
        config.backoff_base = float(raw.get("backoff_base", 0.5))
        return config

    def policy(self, validator=None) -> RetryPolicy:
        return RetryPolicy(
            max_attempts=self.max_attempts,
            backoff_base=self.backoff_base,
            validator=validator,
        )


def _corpus_files(path: Path, pattern: str | None) -> list[Path]:
    if path.is_file():
        return [path]
    if pattern:
        return sorted(p for p in path.glob(pattern) if p.is_file())
    return sorted(
        p for p in path.iterdir() if p.is_file() and not p.name.startswith(".")
    )


def cmd_convert(
    corpus_path: str | Path,
    out_path: str | Path,
    repair: bool = False,
    pattern: str | None = None,
) -> int:
    """Parse corpus files into records. Violating sentences are reported and,
    unless --repair-bio is set, skipped rather than silently rewritten."""
    corpus_path = Path(corpus_path)
    if not corpus_path.exists():
        log.error("no such corpus path: %s", corpus_path)
        return EXIT_INPUT_ERROR
    files = _corpus_files(corpus_path, pattern)
    if not files:
        log.error("no corpus files under %s", corpus_path)
        return EXIT_INPUT_ERROR

    parse_failures: list[str] = []
    all_records: list[SentenceRecord] = []
    violation_count = 0
    repaired_count = 0
    skipped_count = 0
    sentence_count = 0
    for file_path in files:
        try:
            sentences = corpus_mod.parse_conll(file_path)
        except OSError as exc:
            parse_failures.append(f"{file_path}: {exc}")
            continue
        except corpus_mod.FormatError as exc:
            parse_failures.append(str(exc))
            continue
        sentence_count += len(sentences)
        for sentence in sentences:
            violations = corpus_mod.validate_bio(sentence)
            if violations:
                violation_count += len(violations)
                kinds = ", ".join(v.kind.value for v in violations)
                if repair:
                    log.warning("repaired %s (%s)", sentence.sentence_id, kinds)
                    sentence = corpus_mod.repair_bio(sentence)
                    repaired_count += 1
                else:
                    log.warning(
                        "skipping %s (%s); use --repair-bio to include it",
                        sentence.sentence_id,
                        kinds,
                    )
                    skipped_count += 1
                    continue
            all_records.append(corpus_mod.conll_to_record(sentence))

    if parse_failures:
        for failure in parse_failures:
            log.error("parse failure: %s", failure)
        return EXIT_INPUT_ERROR

    write_jsonl(out_path, all_records)
    stats = corpus_mod.entity_stats(all_records, Side.SOURCE)
    print(
        f"converted {len(files)} file(s), {sentence_count} sentence(s) -> "
        f"{len(all_records)} record(s) at {out_path}"
    )
    print(
        f"BIO violations: {violation_count} "
        f"(repaired sentences: {repaired_count}, skipped sentences: {skipped_count})"
    )
    print(corpus_mod.format_label_stats(stats))
    return EXIT_OK


def cmd_audit(path: str | Path, json_out: str | Path | None = None) -> int:
    """Duplicates, annotation conflicts, BIO summary, and entity statistics."""
    path = Path(path)
    if not path.exists():
        log.error("no such path: %s", path)
        return EXIT_INPUT_ERROR

    bio_summary: dict[str, int] | None = None
    if path.is_dir():
        bio_summary = {}
        records: list[SentenceRecord] = []
        for file_path in _corpus_files(path, None):
            for sentence in corpus_mod.parse_conll(file_path):
                for violation in corpus_mod.validate_bio(sentence):
                    bio_summary[violation.kind.value] = (
                        bio_summary.get(violation.kind.value, 0) + 1
                    )
                # repair in memory only, so stats cover every sentence
                records.append(corpus_mod.conll_to_record(corpus_mod.repair_bio(sentence)))
    else:
        records = read_jsonl(path)

    groups = corpus_mod.detect_duplicates(records)
    dup_count = corpus_mod.duplicate_count(groups)
    conflicts = [g for g in groups if not g.annotations_agree]
    stats = corpus_mod.entity_stats(records, Side.SOURCE)

    print(f"records: {len(records)}")
    print(
        f"duplicates: {dup_count} redundant copies in {len(groups)} group(s) "
        "(identical text after outer-whitespace trim; count = sum of group sizes minus one each)"
    )
    print(f"annotation conflicts: {len(conflicts)} group(s)")
    for group in conflicts[:10]:
        print(f"  conflict: {', '.join(group.member_ids)}")
    if bio_summary is not None:
        if bio_summary:
            summary = ", ".join(f"{k}: {v}" for k, v in sorted(bio_summary.items()))
        else:
            summary = "none"
        print(f"BIO violations: {summary}")
    print(corpus_mod.format_label_stats(stats))

    if json_out:
        payload = {
            "records": len(records),
            "duplicates": dup_count,
            "duplicate_groups": [
                {
                    "member_ids": list(g.member_ids),
                    "annotations_agree": g.annotations_agree,
                }
                for g in groups
            ],
            "bio_violations": bio_summary,
            "entity_stats": {
                "counts": stats.counts,
                "total_sentences": stats.total_sentences,
                "total_spans": stats.total_spans,
            },
        }
        Path(json_out).write_text(
            json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )
    return EXIT_OK


def _run_batch(
    records: Sequence[SentenceRecord],
    ledger: Ledger,
    out_path: Path,
    process: Callable[[SentenceRecord], SentenceRecord],
    workers: int,
) -> tuple[int, int]:
    """Process pending records, checkpointing output and ledger after each.

    The output file is rewritten atomically after every completion (newest
    state for every input record, input order), then the id is marked done.
    A crash therefore never loses acknowledged work, and a rerun touches only
    what the ledger does not show as done.
    """
    order = [r.id for r in records]
    by_id = {r.id: r for r in records}
    results: dict[str, SentenceRecord] = {}
    if out_path.exists():
        for prior in read_jsonl(out_path):
            if ledger.is_done(prior.id) and prior.id in by_id:
                results[prior.id] = prior

    def flush() -> None:
        write_jsonl(out_path, [results.get(rid, by_id[rid]) for rid in order])

    todo = pending(records, ledger)
    done_count = 0
    failed_count = 0
    executor = ThreadPoolExecutor(max_workers=max(1, workers))
    try:
        futures = {executor.submit(process, record): record for record in todo}
        for future in as_completed(futures):
            record = futures[future]
            try:
                result = future.result()
            except (KeyboardInterrupt, SystemExit):
                raise
            except Exception as exc:
                log.warning("record %s failed: %s", record.id, exc)
                ledger.mark_failed(record.id, str(exc))
                failed_count += 1
                continue
            results[record.id] = result
            flush()
            ledger.mark_done(record.id)
            done_count += 1
    finally:
        executor.shutdown(wait=False, cancel_futures=True)
    flush()
    return done_count, failed_count


def _batch_exit(records, ledger, failed: int) -> int:
    leftover = [
        r.id for r in records if not ledger.is_done(r.id) and ledger.is_exhausted(r.id)
    ]
    return EXIT_PARTIAL_FAILURE if failed or leftover else EXIT_OK


def cmd_translate(
    records_path: str | Path,
    out_path: str | Path,
    ledger_path: str | Path,
    config: PipelineConfig,
    endpoint: llm_mod.ChatEndpoint,
    template_name: PromptName | None = None,
) -> int:
    """Fill text_rus for every pending record; resumable via the ledger."""
    records = read_jsonl(records_path)
    ledger = Ledger.load(ledger_path, max_attempts=config.max_attempts)
    template = llm_mod.load_template(template_name or config.template)

    def process(record: SentenceRecord) -> SentenceRecord:
        return transfer_mod.translate_record(record, endpoint, template, config.policy())

    done, failed = _run_batch(records, ledger, Path(out_path), process, config.workers)
    print(f"translated {done} record(s), {failed} failure(s); output {out_path}")
    return _batch_exit(records, ledger, failed)


def cmd_transfer(
    records_path: str | Path,
    out_path: str | Path,
    ledger_path: str | Path,
    config: PipelineConfig,
    endpoint: llm_mod.ChatEndpoint,
    diagnostics_path: str | Path | None = None,
) -> int:
    """Project source spans onto the translated texts; resumable."""
    records = read_jsonl(records_path)
    missing = [r.id for r in records if r.text_rus is None]
    if missing:
        log.error(
            "%d record(s) lack text_rus (run translate first): %s%s",
            len(missing),
            ", ".join(missing[:5]),
            "..." if len(missing) > 5 else "",
        )
        return EXIT_INPUT_ERROR

    ledger = Ledger.load(ledger_path, max_attempts=config.max_attempts)
    templates = llm_mod.default_templates()

    def process(record: SentenceRecord) -> SentenceRecord:
        if not record.spans:
            return replace(record, spans_rus=[])
        return transfer_mod.transfer_record(
            record, endpoint, templates, config.transfer, config.policy()
        )

    done, failed = _run_batch(records, ledger, Path(out_path), process, config.workers)

    if diagnostics_path is not None:
        lines = []
        for record in read_jsonl(out_path):
            for item in record.extra.get("unresolved_spans", []):
                lines.append(json.dumps(item, ensure_ascii=False))
        Path(diagnostics_path).write_text(
            "".join(line + "\n" for line in lines), encoding="utf-8"
        )
        print(f"unresolved-span diagnostics: {len(lines)} entries at {diagnostics_path}")

    print(f"transferred {done} record(s), {failed} failure(s); output {out_path}")
    return _batch_exit(records, ledger, failed)


def cmd_eval_transfer(
    gold_path: str | Path,
    sys_path: str | Path,
    json_out: str | Path | None = None,
) -> int:
    """Score system target-side spans against gold ones, paired by id."""
    gold = read_jsonl(gold_path)
    sys_records = read_jsonl(sys_path)
    gold_ids = {r.id for r in gold}
    if gold_ids.isdisjoint({r.id for r in sys_records}):
        log.warning("gold and system id sets are disjoint; everything is unhandled")
    report = metrics_mod.transfer_report(gold, sys_records)
    print(report.format_table())
    print()
    for label in sorted(report.per_label):
        counters = report.per_label[label]
        print(
            f"{label:<24} exact {counters.exact:>5}  wider {counters.wider:>4}  "
            f"narrower {counters.narrower:>4}  mismatched {counters.mismatched:>4}  "
            f"unhandled {counters.unhandled:>4}"
        )
    if json_out:
        Path(json_out).write_text(
            metrics_mod.report_to_json_text(report) + "\n", encoding="utf-8"
        )
    return EXIT_OK


def cmd_eval_translation(
    gold_path: str | Path,
    sys_path: str | Path,
    embedding_endpoint: metrics_mod.EmbeddingEndpoint | None = None,
    batch_size: int = 32,
    bleu_only: bool = False,
    metric: str = "cosine",
    json_out: str | Path | None = None,
) -> int:
    """BLEU plus embedding-based translation scores over paired records."""
    gold = read_jsonl(gold_path)
    sys_by_id = {r.id: r for r in read_jsonl(sys_path)}
    pairs = [
        (g, sys_by_id[g.id])
        for g in gold
        if g.id in sys_by_id
        and g.text_rus is not None
        and sys_by_id[g.id].text_rus is not None
    ]
    if not pairs:
        log.error("no id-paired records with translations on both sides")
        return EXIT_INPUT_ERROR
    if len(pairs) < len(gold):
        log.warning("evaluating %d of %d gold records", len(pairs), len(gold))

    candidates = [s.text_rus for _, s in pairs]
    references = [g.text_rus for g, _ in pairs]
    bleu_score = metrics_mod.bleu(candidates, references)

    bleu_like = parallel = None
    if bleu_only or embedding_endpoint is None:
        if not bleu_only:
            log.warning("no embedding endpoint configured; reporting BLEU only")
    else:
        source_texts = [g.text for g, _ in pairs]
        source_embs = metrics_mod.embed(embedding_endpoint, source_texts, batch_size)
        gold_embs = metrics_mod.embed(embedding_endpoint, references, batch_size)
        sys_embs = metrics_mod.embed(embedding_endpoint, candidates, batch_size)
        bleu_like = metrics_mod.bleu_like_metric(gold_embs, sys_embs, metric=metric)
        parallel = metrics_mod.parallel_comparison(
            source_embs, gold_embs, sys_embs, metric=metric
        )

    scores = metrics_mod.TranslationScores(
        bleu=bleu_score, bleu_like=bleu_like, parallel_comparison=parallel
    )
    print(f"pairs evaluated: {len(pairs)}")
    print(scores.format_table())
    if json_out:
        Path(json_out).write_text(
            json.dumps(scores.to_json(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    return EXIT_OK


def cmd_export(
    records_path: str | Path, out_dir: str | Path, side: Side = Side.TARGET
) -> int:
    """Emit the chosen side of the records as CoNLL-format files."""
    records = read_jsonl(records_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    grouped: dict[str, list[corpus_mod.ConllSentence]] = {}
    skipped = 0
    for record in records:
        text, spans = (
            (record.text, record.spans)
            if side is Side.SOURCE
            else (record.text_rus, record.spans_rus)
        )
        if text is None or spans is None:
            log.warning("skipping %s: no %s side", record.id, side.value)
            skipped += 1
            continue
        try:
            sentence = corpus_mod.record_to_bio(record, side)
        except corpus_mod.OverlappingSpans as exc:
            log.warning("skipping %s: %s", record.id, exc)
            skipped += 1
            continue
        stem = record.id.split("#", 1)[0] if "#" in record.id else "records.conll"
        grouped.setdefault(stem, []).append(sentence)

    for stem, sentences in grouped.items():
        corpus_mod.write_conll(sentences, out_dir / stem)
    total = sum(len(v) for v in grouped.values())
    print(
        f"exported {total} sentence(s) into {len(grouped)} file(s) at {out_dir} "
        f"({skipped} skipped)"
    )
    return EXIT_OK


def build_mock_chat() -> llm_mod.MockChatEndpoint:
    return llm_mod.mock_llm(llm_mod.MockScript(default=llm_mod.EchoIdentity()))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="annobridge",
        description=(
            "Move a BIO-annotated corpus and its spans from one language to "
            "another through a chat LLM, then verify and score the result."
        ),
    )
    parser.add_argument("--config", help="JSON config file with endpoint settings")
    parser.add_argument("--workers", type=int, help="parallel workers for batch stages")
    parser.add_argument(
        "--mock",
        action="store_true",
        help="route chat/embedding traffic to offline deterministic mocks",
    )
    parser.add_argument("--seed", type=int, help="seed for randomized fixtures")
    parser.add_argument("-v", "--verbose", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="corpus files -> records JSONL")
    p.add_argument("corpus", help="corpus directory or single file")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--repair-bio", action="store_true", help="rewrite illegal I- tags")
    p.add_argument("--pattern", help="glob for corpus files, e.g. '*.deft'")

    p = sub.add_parser("audit", help="duplicates, conflicts, BIO and label stats")
    p.add_argument("path", help="records JSONL or corpus directory")
    p.add_argument("--json", dest="json_out")

    p = sub.add_parser("translate", help="fill text_rus via the chat endpoint")
    p.add_argument("records")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--ledger", required=True)
    p.add_argument("--template", choices=[t.value for t in PromptName if t != PromptName.TRANSFER_SPANS])
    p.add_argument("--transcript", help="JSONL audit log of raw exchanges")

    p = sub.add_parser("transfer", help="project spans onto translated texts")
    p.add_argument("records")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--ledger", required=True)
    p.add_argument("--diagnostics", help="JSONL sidecar for unresolved spans")
    p.add_argument("--no-fuzzy", action="store_true")
    p.add_argument("--fuzzy-threshold", type=float)
    p.add_argument(
        "--leftmost",
        action="store_true",
        help="bind repeated surfaces to the leftmost occurrence instead of in order",
    )
    p.add_argument("--transcript")

    p = sub.add_parser("eval-transfer", help="five-way span match report")
    p.add_argument("gold")
    p.add_argument("system")
    p.add_argument("--json", dest="json_out")

    p = sub.add_parser("eval-translation", help="BLEU and embedding scores")
    p.add_argument("gold")
    p.add_argument("system")
    p.add_argument("--json", dest="json_out")
    p.add_argument("--bleu-only", action="store_true")
    p.add_argument("--metric", choices=["cosine", "euclidean"], default="cosine")

    p = sub.add_parser("export", help="records -> CoNLL files")
    p.add_argument("records")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--side", choices=[s.value for s in Side], default=Side.TARGET.value)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.seed is not None:
        random.seed(args.seed)

    try:
        config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    except (OSError, ValueError, KeyError) as exc:
        log.error("bad config: %s", exc)
        return EXIT_INPUT_ERROR
    if args.workers:
        config.workers = args.workers

    def chat_endpoint() -> llm_mod.ChatEndpoint | None:
        if args.mock:
            return build_mock_chat()
        if config.chat is None:
            return None
        return llm_mod.HttpChatEndpoint(config.chat)

    def embedding_endpoint() -> metrics_mod.EmbeddingEndpoint | None:
        if args.mock:
            return metrics_mod.MockEmbeddingEndpoint()
        if config.embedding is None:
            return None
        return metrics_mod.HttpEmbeddingEndpoint(config.embedding)

    try:
        if args.command == "convert":
            return cmd_convert(args.corpus, args.out, args.repair_bio, args.pattern)

        if args.command == "audit":
            return cmd_audit(args.path, args.json_out)

        if args.command == "translate":
            endpoint = chat_endpoint()
            if endpoint is None:
                log.error("no chat endpoint configured (use --config or --mock)")
                return EXIT_INPUT_ERROR
            if args.transcript:
                endpoint = llm_mod.TranscriptingEndpoint(endpoint, args.transcript)
            template = PromptName(args.template) if args.template else None
            return cmd_translate(
                args.records, args.out, args.ledger, config, endpoint, template
            )

        if args.command == "transfer":
            endpoint = chat_endpoint()
            if endpoint is None:
                log.error("no chat endpoint configured (use --config or --mock)")
                return EXIT_INPUT_ERROR
            if args.transcript:
                endpoint = llm_mod.TranscriptingEndpoint(endpoint, args.transcript)
            overrides = {}
            if args.no_fuzzy:
                overrides["fuzzy_enabled"] = False
            if args.fuzzy_threshold is not None:
                overrides["fuzzy_threshold"] = args.fuzzy_threshold
            if args.leftmost:
                overrides["occurrence_policy"] = transfer_mod.OccurrencePolicy.LEFTMOST
            if overrides:
                config.transfer = replace(config.transfer, **overrides)
            return cmd_transfer(
                args.records, args.out, args.ledger, config, endpoint, args.diagnostics
            )

        if args.command == "eval-transfer":
            return cmd_eval_transfer(args.gold, args.system, args.json_out)

        if args.command == "eval-translation":
            return cmd_eval_translation(
                args.gold,
                args.system,
                embedding_endpoint=None if args.bleu_only else embedding_endpoint(),
                batch_size=config.embedding.batch_size if config.embedding else 32,
                bleu_only=args.bleu_only,
                metric=args.metric,
                json_out=args.json_out,
            )

        if args.command == "export":
            return cmd_export(args.records, args.out, Side(args.side))
    except (OSError, records_mod.ParseError, corpus_mod.MissingField) as exc:
        log.error("%s", exc)
        return EXIT_INPUT_ERROR

    return EXIT_INPUT_ERROR


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
