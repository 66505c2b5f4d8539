import hypothesis.strategies as st
from hypothesis import settings

from annobridge.corpus import ConllSentence, TokenRow

settings.register_profile("ci", deadline=None)
settings.load_profile("ci")

LABELS = ("Term", "Definition", "Alias-Term", "Qualifier")

token_st = st.text(alphabet="abcdefабвгде", min_size=1, max_size=8)


@st.composite
def conll_sentences(draw, max_tokens=30, max_spans=4):
    """Random valid-BIO sentence with non-overlapping labeled runs."""
    n = draw(st.integers(min_value=1, max_value=max_tokens))
    tokens = draw(st.lists(token_st, min_size=n, max_size=n))
    tags = ["O"] * n
    for _ in range(draw(st.integers(min_value=0, max_value=max_spans))):
        start = draw(st.integers(min_value=0, max_value=n - 1))
        length = draw(st.integers(min_value=1, max_value=3))
        stop = min(n, start + length)
        if all(tags[i] == "O" for i in range(start, stop)):
            label = draw(st.sampled_from(LABELS))
            tags[start] = f"B-{label}"
            for i in range(start + 1, stop):
                tags[i] = f"I-{label}"

    rows = []
    position = 0
    for token, tag in zip(tokens, tags):
        rows.append(
            TokenRow(
                token=token,
                source_file="gen.deft",
                start_char=position,
                end_char=position + len(token),
                tag=tag,
            )
        )
        position += len(token) + 1
    index = draw(st.integers(min_value=0, max_value=999))
    return ConllSentence(rows=tuple(rows), sentence_id=f"gen.deft#{index}")
