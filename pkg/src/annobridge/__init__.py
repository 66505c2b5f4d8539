"""annobridge: move a BIO-annotated corpus and its spans between languages
through a chat LLM, then resolve, verify, and score the projected annotation.
"""

from .corpus import (
    BioViolation,
    CharSpan,
    ConllSentence,
    DuplicateGroup,
    LabelStats,
    SentenceRecord,
    Side,
    TokenRow,
    ViolationKind,
    conll_to_record,
    detect_duplicates,
    duplicate_count,
    entity_stats,
    parse_conll,
    record_to_bio,
    repair_bio,
    validate_bio,
)
from .llm import (
    ChatExchange,
    PromptName,
    PromptTemplate,
    RawRusSpan,
    RetryPolicy,
    chat,
    extract_json,
    load_template,
    mock_llm,
    render_prompt,
    validate_transfer_response,
)
from .metrics import (
    MatchClass,
    TransferReport,
    TranslationScores,
    bleu,
    bleu_like_metric,
    classify_match,
    cosine_distance,
    embed,
    parallel_comparison,
    transfer_report,
)
from .records import Ledger, pending, read_jsonl, write_jsonl
from .transfer import (
    ResolvedSpan,
    TransferConfig,
    UnresolvedSpan,
    fuzzy_locate,
    levenshtein,
    locate_exact,
    resolve_spans,
    transfer_record,
    translate_record,
)

__version__ = "0.1.0"
