"""Candidate entity span extraction.

Two strategies produce spans for retrieval: a rule-based one that enumerates
n-grams over whole sentences, and a segment-based one that first narrows
sentences to clinically relevant windows (externally tagged segments plus
punctuation/conjunction splits) and enumerates n-grams inside each window.

All offsets are Unicode character offsets into the original document; span
text is lowercased but offsets always point at the untouched source.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

NGRAM_MIN = 2
NGRAM_MAX = 10

RULE_BASED = "rule_based"
SEGMENT_BASED = "segment_based"

# Sentence boundary guard: a period after one of these (or after a single
# letter) does not end a sentence.
ABBREVIATIONS = {
    "dr", "mr", "mrs", "ms", "prof", "st", "jr", "sr", "vs", "etc",
    "e.g", "i.e", "cf", "al", "fig", "figs", "no", "nos", "approx",
    "dept", "univ", "inc", "ltd",
}

# Coordinating conjunctions that terminate a segment window.
SEGMENT_CONJUNCTIONS = {"and", "or", "but"}

EXTERNAL_TAGGER = "external_tagger"
PUNCTUATION_SPLIT = "punctuation_split"


@dataclass(frozen=True)
class Token:
    text: str
    start: int
    end: int
    is_function_word: bool = False
    is_punctuation: bool = False


@dataclass(frozen=True)
class EntitySpan:
    doc_id: str
    start: int
    end: int
    text: str
    strategy: str


@dataclass(frozen=True)
class Segment:
    doc_id: str
    start: int
    end: int
    source: str


class SegmentBoundsError(ValueError):
    """Raised when an external segment lies outside its document."""


def load_function_words(path: str | Path | None = None) -> frozenset[str]:
    """Load the closed-class lexicon (one token per line, '#' comments)."""
    if path is None:
        text = resources.files("conceptrec.data").joinpath("function_words.txt").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    words = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(line.lower())
    return frozenset(words)


_DEFAULT_LEXICON: frozenset[str] | None = None


def default_function_words() -> frozenset[str]:
    global _DEFAULT_LEXICON
    if _DEFAULT_LEXICON is None:
        _DEFAULT_LEXICON = load_function_words()
    return _DEFAULT_LEXICON


def _is_punct_char(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def split_sentences(text: str) -> list[tuple[int, int]]:
    """Sentence offsets: break at ., ?, ! and newline with an abbreviation guard.

    A period only terminates a sentence when followed by whitespace or end of
    text, and not when it trails a single letter or a known abbreviation.
    Returned offsets exclude surrounding whitespace; the terminator itself is
    part of its sentence.
    """
    sentences: list[tuple[int, int]] = []
    n = len(text)
    i = 0

    def emit(lo: int, hi: int) -> None:
        while lo < hi and text[lo].isspace():
            lo += 1
        while hi > lo and text[hi - 1].isspace():
            hi -= 1
        if lo < hi:
            sentences.append((lo, hi))

    start = 0
    while i < n:
        ch = text[i]
        if ch == "\n":
            emit(start, i)
            start = i + 1
        elif ch in ".?!":
            followed_ok = i + 1 >= n or text[i + 1].isspace()
            if ch == "." and followed_ok:
                # preceding word, including internal periods ("e.g"), decides the guard
                j = i
                while j > 0 and (text[j - 1].isalpha() or text[j - 1] == "."):
                    j -= 1
                word = text[j:i].strip(".").lower()
                if (len(word) == 1 and word.isalpha()) or word in ABBREVIATIONS:
                    followed_ok = False
            if followed_ok:
                emit(start, i + 1)
                start = i + 1
        i += 1
    emit(start, n)
    return sentences


def tokenize(text: str, offset: int = 0, lexicon: frozenset[str] | None = None) -> list[Token]:
    """Whitespace tokenization with leading/trailing punctuation peeled off.

    `offset` shifts token offsets so they index the full document when `text`
    is a sentence or segment slice. Word-internal punctuation (hyphens,
    apostrophes, "e.g.") is left intact.
    """
    if lexicon is None:
        lexicon = default_function_words()
    tokens: list[Token] = []

    def add(tok: str, start: int) -> None:
        punct = all(_is_punct_char(c) for c in tok)
        tokens.append(
            Token(
                text=tok,
                start=offset + start,
                end=offset + start + len(tok),
                is_function_word=(not punct) and tok.lower() in lexicon,
                is_punctuation=punct,
            )
        )

    i = 0
    n = len(text)
    while i < n:
        if text[i].isspace():
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace():
            j += 1
        lo, hi = i, j
        # peel leading punctuation characters one at a time
        while lo < hi and _is_punct_char(text[lo]):
            add(text[lo], lo)
            lo += 1
        # locate trailing punctuation run, emit the core first
        trail = hi
        while trail > lo and _is_punct_char(text[trail - 1]):
            trail -= 1
        if lo < trail:
            add(text[lo:trail], lo)
        for k in range(trail, hi):
            add(text[k], k)
        i = j
    return tokens


def enumerate_ngrams(
    tokens: list[Token],
    doc_id: str,
    text: str,
    strategy: str,
    n_min: int = NGRAM_MIN,
    n_max: int = NGRAM_MAX,
) -> list[EntitySpan]:
    """All contiguous token runs of length n in [n_min, n_max] as spans.

    Span offsets run from the first token's start to the last token's end;
    span text is the lowercased document slice (interior whitespace kept as
    it appears in the document).
    """
    spans: list[EntitySpan] = []
    k = len(tokens)
    for n in range(n_min, min(n_max, k) + 1):
        for i in range(k - n + 1):
            start = tokens[i].start
            end = tokens[i + n - 1].end
            spans.append(
                EntitySpan(
                    doc_id=doc_id,
                    start=start,
                    end=end,
                    text=text[start:end].lower(),
                    strategy=strategy,
                )
            )
    return spans


def boundary_filter(spans: list[EntitySpan], tokens: list[Token]) -> list[EntitySpan]:
    """Drop spans whose first or last token is punctuation or a function word."""
    by_start = {t.start: t for t in tokens}
    by_end = {t.end: t for t in tokens}
    kept: list[EntitySpan] = []
    for span in spans:
        first = by_start.get(span.start)
        last = by_end.get(span.end)
        if first is None or last is None:
            continue
        if first.is_punctuation or first.is_function_word:
            continue
        if last.is_punctuation or last.is_function_word:
            continue
        kept.append(span)
    return kept


def extract_rule_based(
    doc_id: str,
    text: str,
    lexicon: frozenset[str] | None = None,
    n_min: int = NGRAM_MIN,
    n_max: int = NGRAM_MAX,
) -> list[EntitySpan]:
    """Sentence-windowed n-gram extraction with the boundary filter."""
    spans: list[EntitySpan] = []
    for s_start, s_end in split_sentences(text):
        tokens = tokenize(text[s_start:s_end], offset=s_start, lexicon=lexicon)
        candidates = enumerate_ngrams(tokens, doc_id, text, RULE_BASED, n_min, n_max)
        spans.extend(boundary_filter(candidates, tokens))
    spans.sort(key=lambda s: (s.start, s.end))
    return spans


def split_segments(
    doc_id: str,
    text: str,
    sentences: list[tuple[int, int]],
    external_segments: list[Segment] | None = None,
    lexicon: frozenset[str] | None = None,
) -> list[Segment]:
    """Union of external segments and punctuation/conjunction sentence splits.

    Each sentence is cut at every punctuation token and at coordinating
    conjunctions (and/or/but); the cut token belongs to neither side. Empty
    pieces are dropped and duplicate (start, end) windows collapse to one.
    """
    n = len(text)
    segments: dict[tuple[int, int], Segment] = {}

    for seg in external_segments or []:
        if seg.start < 0 or seg.end > n or seg.start >= seg.end:
            raise SegmentBoundsError(
                f"segment ({seg.start}, {seg.end}) outside document {doc_id!r} of length {n}"
            )
        key = (seg.start, seg.end)
        if key not in segments:
            segments[key] = Segment(doc_id=doc_id, start=seg.start, end=seg.end, source=seg.source)

    def emit(lo: int, hi: int) -> None:
        while lo < hi and text[lo].isspace():
            lo += 1
        while hi > lo and text[hi - 1].isspace():
            hi -= 1
        if lo < hi and (lo, hi) not in segments:
            segments[(lo, hi)] = Segment(doc_id=doc_id, start=lo, end=hi, source=PUNCTUATION_SPLIT)

    for s_start, s_end in sentences:
        tokens = tokenize(text[s_start:s_end], offset=s_start, lexicon=lexicon)
        piece_start = s_start
        for tok in tokens:
            if tok.is_punctuation or tok.text.lower() in SEGMENT_CONJUNCTIONS:
                emit(piece_start, tok.start)
                piece_start = tok.end
        emit(piece_start, s_end)

    return sorted(segments.values(), key=lambda s: (s.start, s.end))


def extract_segment_based(
    doc_id: str,
    text: str,
    external_segments: list[Segment] | None = None,
    lexicon: frozenset[str] | None = None,
    n_min: int = NGRAM_MIN,
    n_max: int = NGRAM_MAX,
) -> list[EntitySpan]:
    """Segment-windowed n-gram extraction; spans never cross a window edge."""
    sentences = split_sentences(text)
    segments = split_segments(doc_id, text, sentences, external_segments, lexicon=lexicon)
    seen: set[tuple[int, int]] = set()
    spans: list[EntitySpan] = []
    for seg in segments:
        tokens = tokenize(text[seg.start:seg.end], offset=seg.start, lexicon=lexicon)
        candidates = enumerate_ngrams(tokens, doc_id, text, SEGMENT_BASED, n_min, n_max)
        for span in boundary_filter(candidates, tokens):
            key = (span.start, span.end)
            if key not in seen:
                seen.add(key)
                spans.append(span)
    spans.sort(key=lambda s: (s.start, s.end))
    return spans


def load_segments(path: str | Path) -> dict[str, list[Segment]]:
    """Read the standoff TSV (doc_id<TAB>start<TAB>end) of tagged segments."""
    out: dict[str, list[Segment]] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"line {line_no}: expected 'doc_id<TAB>start<TAB>end', got {line!r}")
            try:
                start, end = int(parts[1]), int(parts[2])
            except ValueError:
                raise ValueError(f"line {line_no}: non-integer offsets in {line!r}") from None
            if start >= end:
                raise ValueError(f"line {line_no}: empty segment ({start}, {end})")
            out.setdefault(parts[0], []).append(
                Segment(doc_id=parts[0], start=start, end=end, source=EXTERNAL_TAGGER)
            )
    return out
