"""Acceptance gate: one test per release criterion, each printing a PASS line.

Criteria 1 and 2 check the toolkit against the public DEFT corpus, which is
not bundled here. Point DEFT_CORPUS_DIR at a checkout (see
scripts/fetch_deft_corpus.sh) to enable them; without it they skip with a
notice instead of silently passing.
"""

import json
import os
import random
import time
from pathlib import Path

import pytest

from annobridge import cli
from annobridge.corpus import (
    ConllSentence,
    TokenRow,
    conll_to_record,
    detect_duplicates,
    duplicate_count,
    entity_stats,
    record_to_bio,
    repair_bio,
    validate_bio,
)
from annobridge.llm import EchoGold, InterruptAfter, EchoIdentity, MockScript, mock_llm
from annobridge.metrics import (
    MatchClass,
    TranslationScores,
    bleu,
    classify_match,
    transfer_report,
)
from annobridge.records import Ledger, read_jsonl, write_jsonl
from annobridge.transfer import TransferConfig, resolve_spans
from annobridge.llm import RawRusSpan
from bleu_reference import reference_bleu
from synthetic import make_gold_set, perturb_surface_absent, strip_target_spans
from test_metrics import random_corpus, span

FIXTURES = Path(__file__).parent / "fixtures"

# Entity counts for the corpus snapshot this toolkit was calibrated against
# (dev split, source side).
EXPECTED_DEV_COUNTS = {
    "Term": 323,
    "Definition": 296,
    "Alias-Term": 26,
    "Secondary-Definition": 17,
    "Referential-Definition": 8,
    "Qualifier": 5,
    "Referential-Term": 4,
    "Definition-frag": 1,
    "Ordered-Term": 1,
    "Ordered-Definition": 1,
}
EXPECTED_TRAIN_DUPLICATES = 2158


def report_pass(criterion: str, detail: str) -> None:
    print(f"\nACCEPTANCE PASS [{criterion}]: {detail}")


def deft_split(name: str) -> Path:
    root = os.environ.get("DEFT_CORPUS_DIR")
    if not root:
        pytest.skip(
            "needs the public DEFT corpus: set DEFT_CORPUS_DIR to a checkout "
            "(scripts/fetch_deft_corpus.sh); the check then runs exactly"
        )
    for candidate in (
        Path(root) / "data" / "deft_files" / name,
        Path(root) / "deft_files" / name,
        Path(root) / name,
    ):
        if candidate.is_dir():
            return candidate
    pytest.skip(f"DEFT_CORPUS_DIR={root} has no '{name}' split directory")


class TestCriterion1CorpusStatistics:
    def test_dev_split_entity_counts(self, tmp_path):
        dev_dir = deft_split("dev")
        out = tmp_path / "dev.jsonl"
        started = time.monotonic()
        assert cli.cmd_convert(dev_dir, out, repair=True) == 0
        stats = entity_stats(read_jsonl(out))
        elapsed = time.monotonic() - started
        for label, expected in EXPECTED_DEV_COUNTS.items():
            got = stats.counts.get(label, 0)
            assert got == expected, (
                f"dev split count for {label}: got {got}, expected {expected} "
                f"(full histogram: {stats.counts})"
            )
        assert elapsed < 60, f"took {elapsed:.1f}s, budget is 60s"
        report_pass(
            "criterion-1",
            f"dev split reproduces all {len(EXPECTED_DEV_COUNTS)} expected label counts "
            f"in {elapsed:.1f}s",
        )


class TestCriterion2DuplicateAudit:
    def test_train_split_duplicate_count(self, tmp_path):
        train_dir = deft_split("train")
        out = tmp_path / "train.jsonl"
        started = time.monotonic()
        assert cli.cmd_convert(train_dir, out, repair=True) == 0
        groups = detect_duplicates(read_jsonl(out))
        count = duplicate_count(groups)
        elapsed = time.monotonic() - started
        assert count == EXPECTED_TRAIN_DUPLICATES, (
            f"obtained duplicate count {count} != expected {EXPECTED_TRAIN_DUPLICATES}. "
            "Comparator: records whose texts are byte-identical after trimming outer "
            "whitespace form one group; the count is the sum over groups of "
            "(group size - 1). If the upstream corpus snapshot changed, record the "
            "obtained count rather than tuning the comparator."
        )
        assert elapsed < 60, f"took {elapsed:.1f}s, budget is 60s"
        report_pass(
            "criterion-2",
            f"train split yields exactly {count} duplicates in {elapsed:.1f}s",
        )


def random_valid_sentence(rng: random.Random) -> ConllSentence:
    labels = ("Term", "Definition", "Alias-Term", "Qualifier")
    n = rng.randint(1, 30)
    tokens = ["".join(rng.choice("abcdefgабвгде") for _ in range(rng.randint(1, 7))) for _ in range(n)]
    tags = ["O"] * n
    for _ in range(rng.randint(0, 4)):
        start = rng.randrange(n)
        stop = min(n, start + rng.randint(1, 3))
        if all(tags[i] == "O" for i in range(start, stop)):
            label = rng.choice(labels)
            tags[start] = f"B-{label}"
            for i in range(start + 1, stop):
                tags[i] = f"I-{label}"
    rows = []
    position = 0
    for token, tag in zip(tokens, tags):
        rows.append(TokenRow(token, "gen", position, position + len(token), tag))
        position += len(token) + 1
    return ConllSentence(rows=tuple(rows), sentence_id=f"gen#{rng.randrange(10**9)}")


class TestCriterion3BioRoundTrip:
    def test_thousand_random_sentences(self):
        rng = random.Random(424242)
        started = time.monotonic()
        failures = 0
        for _ in range(1000):
            sentence = random_valid_sentence(rng)
            assert validate_bio(sentence) == []
            if record_to_bio(conll_to_record(sentence)).tags() != sentence.tags():
                failures += 1
        elapsed = time.monotonic() - started
        assert failures == 0
        assert elapsed < 10, f"took {elapsed:.1f}s, budget is 10s"
        report_pass(
            "criterion-3",
            f"1000 random sentences round-trip with 0 tag failures in {elapsed:.1f}s",
        )


class TestCriterion4MatchTruthTable:
    def test_sixteen_case_fixture(self):
        cases = json.loads((FIXTURES / "match_cases.json").read_text("utf-8"))
        assert len(cases) == 16
        errors = []
        for case in cases:
            gold = span(*case["gold"])
            sys_span = span(*case["sys"]) if case["sys"] else None
            got = classify_match(gold, sys_span)
            if got != MatchClass(case["expected"]):
                errors.append((case, got.value))
        assert errors == []
        covered = {case["expected"] for case in cases}
        assert covered == {"exact", "wider", "narrower", "mismatch", "unhandled"}
        report_pass("criterion-4", "16-case truth-table fixture classified with 0 errors")


class TestCriterion5BleuOracle:
    def test_oracle_equivalence_and_exact_endpoints(self):
        rng = random.Random(515151)
        worst = 0.0
        for _ in range(20):
            references = random_corpus(rng, max_sentences=10, max_tokens=15)
            candidates = [
                " ".join(
                    token if rng.random() < 0.65 else rng.choice(["кот", "дом", "лес"])
                    for token in sentence.split()
                )
                for sentence in references
            ]
            mine = bleu(candidates, references)
            theirs = reference_bleu(candidates, references)
            worst = max(worst, abs(mine - theirs))
            assert abs(mine - theirs) <= 1e-9, (candidates, references, mine, theirs)
        identity_corpus = ["кот дом лес шёл был там", "он шёл и шёл"]
        assert bleu(identity_corpus, identity_corpus) == 1.0
        assert bleu(["aaa bbb ccc ddd"], ["eee fff ggg hhh"]) == 0.0
        report_pass(
            "criterion-5",
            f"corpus BLEU matches the independent reference on 20 corpora "
            f"(max |diff| {worst:.2e}); identity=1.0 and zero-overlap=0.0 exact",
        )


class TestCriterion6OfflineEndToEnd:
    def test_echo_gold_over_870_records(self, tmp_path):
        started = time.monotonic()
        gold = make_gold_set(870, seed=870)
        assert all(r.spans_rus for r in gold)
        gold_path = tmp_path / "gold.jsonl"
        pending_path = tmp_path / "pending.jsonl"
        out_path = tmp_path / "transferred.jsonl"
        write_jsonl(gold_path, gold)
        write_jsonl(pending_path, strip_target_spans(gold))

        endpoint = mock_llm(MockScript(default=EchoGold(gold={r.id: r for r in gold})))
        config = cli.PipelineConfig()
        config.backoff_base = 0.0
        assert (
            cli.cmd_transfer(
                pending_path, out_path, tmp_path / "ledger.jsonl", config, endpoint
            )
            == 0
        )
        json_out = tmp_path / "report.json"
        assert cli.cmd_eval_transfer(gold_path, out_path, json_out) == 0
        payload = json.loads(json_out.read_text(encoding="utf-8"))
        elapsed = time.monotonic() - started

        total_spans = sum(len(r.spans_rus) for r in gold)
        assert payload["mismatched"] == 0
        assert payload["exact"] == payload["spans_checked"] == total_spans
        assert payload["unhandled"] == 0
        assert payload["total_entries"] == 870
        assert elapsed < 60, f"took {elapsed:.1f}s, budget is 60s"
        report_pass(
            "criterion-6",
            f"echo-gold transfer of 870 records: exact == spans_checked == "
            f"{total_spans}, mismatched == 0, in {elapsed:.1f}s",
        )


class TestCriterion7FuzzyRecovery:
    def build_perturbed(self):
        rng = random.Random(777)
        gold = make_gold_set(
            230, seed=77, ru_word_len=10, spans_per_record=(2, 3)
        )
        cases = []
        total = 0
        for record in gold:
            raws = []
            for gold_span in record.spans_rus:
                raws.append(
                    RawRusSpan(
                        gold_span.label,
                        gold_span.span_id,
                        perturb_surface_absent(
                            rng, gold_span.surface, record.text_rus, max_edits_per_word=2
                        ),
                    )
                )
                total += 1
            cases.append((record, raws))
            if total >= 500:
                break
        assert total >= 500
        return cases, total

    def test_recovery_rate_and_degenerate_threshold(self):
        cases, total = self.build_perturbed()
        started = time.monotonic()
        recovered = 0
        for record, raws in cases:
            gold_by_id = {s.span_id: s for s in record.spans_rus}
            resolved, _ = resolve_spans(record, raws, TransferConfig())
            for item in resolved:
                target = gold_by_id[item.span.span_id]
                if (item.span.start, item.span.end) == (target.start, target.end):
                    recovered += 1
        elapsed = time.monotonic() - started
        rate = recovered / total
        assert rate >= 0.95, f"recovered {recovered}/{total} = {rate:.3f} < 0.95"

        # threshold 0 must behave exactly like disabling fuzzy search
        for record, raws in cases:
            zero, zero_un = resolve_spans(
                record, raws, TransferConfig(fuzzy_threshold=0.0)
            )
            off, off_un = resolve_spans(record, raws, TransferConfig(fuzzy_enabled=False))
            assert zero == off
            assert [u.span_id for u in zero_un] == [u.span_id for u in off_un]
        assert elapsed < 30, f"took {elapsed:.1f}s, budget is 30s"
        report_pass(
            "criterion-7",
            f"fuzzy search recovers {recovered}/{total} = {rate:.1%} perturbed spans "
            f"in {elapsed:.1f}s; threshold 0 equals exact-only resolution",
        )


class TestCriterion8ResumeCorrectness:
    def test_interrupt_and_resume_issue_exactly_remainder(self, tmp_path):
        n, k = 20, 7
        records = [
            cli.SentenceRecord(id=f"r{i:02d}", text=f"sentence number {i}")
            for i in range(n)
        ]
        records_path = tmp_path / "records.jsonl"
        out_path = tmp_path / "out.jsonl"
        ledger_path = tmp_path / "ledger.jsonl"
        write_jsonl(records_path, records)
        config = cli.PipelineConfig()
        config.backoff_base = 0.0

        first = mock_llm(MockScript(default=InterruptAfter(k)))
        with pytest.raises(KeyboardInterrupt):
            cli.cmd_translate(records_path, out_path, ledger_path, config, first)
        # k records were acknowledged before the interrupt; calls beyond that
        # all died in the poisoned endpoint, so nothing else reached the ledger
        assert len(Ledger.load(ledger_path).done_ids) == k

        second = mock_llm(MockScript(default=EchoIdentity()))
        assert cli.cmd_translate(records_path, out_path, ledger_path, config, second) == 0
        assert second.calls == n - k
        assert sum(1 for r in read_jsonl(out_path) if r.text_rus) == n
        report_pass(
            "criterion-8",
            f"after interrupting at {k}/{n}, the rerun issued exactly {second.calls} "
            f"== n-k == {n - k} requests",
        )


class TestCriterion9ReportShapesOnly:
    """Live-model transfer counts and translation scores depend on external
    nondeterministic services and are out of scope at desk scale; the
    property-based criteria above replace them. What must hold here is that
    the report layouts those tables use are reproduced as output formats."""

    def test_report_layouts_stand_in_for_live_numbers(self):
        gold = read_jsonl(FIXTURES / "report_gold.jsonl")
        table = transfer_report(gold, gold).format_table()
        for row in (
            "Total Entries",
            "Exact Match",
            "Wider Match",
            "Narrower Match",
            "Mismatched",
            "Spans Checked",
        ):
            assert row in table
        scores = TranslationScores(bleu=0.5011, bleu_like=0.2267, parallel_comparison=0.001)
        score_table = scores.format_table()
        for row in ("BLEU", "BLEU-like", "Parallel comparison"):
            assert row in score_table
        assert "0.5011" in score_table  # four-decimal 0-1 scale presentation
        report_pass(
            "criterion-9",
            "transfer and translation report layouts reproduced; live-model "
            "numbers are documented as out of scope and covered by criteria 3-8",
        )
