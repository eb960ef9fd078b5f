"""Text representation: tokenizer, vocabulary, pin text assembly.

The tokenizer lowercases, splits on whitespace and Unicode punctuation
(punctuation is dropped), and falls back to single-character tokens for CJK
codepoints so the pipeline stays language-agnostic without a subword
trainer. Pin text is the concatenation of per-field token runs in a fixed
field order, optionally separated by a reserved FIELD token; the joint
model input is query tokens ++ SEP ++ pin tokens with segment ids 0/1.
"""

from __future__ import annotations

import json
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import PinDocument, QueryRecord

PAD_ID = 0
SEP_ID = 1
UNK_ID = 2
FIELD_ID = 3
NUM_RESERVED = 4

# Assembly order: caption first (the one field always derivable from the
# image), then owner text, link text, curated boards, engaged query tokens.
FIELD_ORDER = (
    "synthetic_caption",
    "title",
    "description",
    "link_title",
    "link_description",
    "board_titles",
    "engaged_query_tokens",
)

# CJK codepoint ranges emitted as single-character tokens.
_CJK_RANGES = (
    (0x3040, 0x30FF),  # hiragana + katakana
    (0x3400, 0x4DBF),  # CJK extension A
    (0x4E00, 0x9FFF),  # CJK unified ideographs
    (0xAC00, 0xD7AF),  # hangul syllables
    (0xF900, 0xFAFF),  # CJK compatibility ideographs
    (0x20000, 0x2A6DF),  # CJK extension B
)


class TextRepError(ValueError):
    pass


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


# ASCII has no CJK codepoints, so for ASCII text tokenization reduces to
# splitting on whitespace/punctuation. The class is built from the same
# predicates the general path uses, keeping the two paths equivalent.
_ASCII_BOUNDARY = re.compile(
    "["
    + re.escape(
        "".join(
            ch
            for ch in map(chr, range(128))
            if ch.isspace() or unicodedata.category(ch).startswith("P")
        )
    )
    + "]+"
)


def tokenize(text: str) -> list[str]:
    """Lowercase and split; punctuation splits and is dropped, CJK chars
    become single-character tokens."""
    lowered = text.lower()
    if lowered.isascii():
        return [t for t in _ASCII_BOUNDARY.split(lowered) if t]

    tokens: list[str] = []
    current: list[str] = []

    def flush() -> None:
        if current:
            tokens.append("".join(current))
            current.clear()

    for ch in lowered:
        if ch.isspace() or unicodedata.category(ch).startswith("P"):
            flush()
        elif _is_cjk(ch):
            flush()
            tokens.append(ch)
        else:
            current.append(ch)
    flush()
    return tokens


@dataclass(frozen=True)
class Vocabulary:
    """Frozen token -> id map; ids 0..3 are reserved (PAD, SEP, UNK, FIELD)."""

    token_to_id: dict[str, int]

    def __post_init__(self) -> None:
        expected = set(range(NUM_RESERVED, NUM_RESERVED + len(self.token_to_id)))
        if set(self.token_to_id.values()) != expected:
            raise TextRepError("vocabulary ids must be dense starting at 4")

    @property
    def size(self) -> int:
        return NUM_RESERVED + len(self.token_to_id)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def content_hash(self) -> str:
        import hashlib

        payload = json.dumps(sorted(self.token_to_id.items()), ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def build_vocabulary(
    pins: Sequence[PinDocument],
    queries: Sequence[QueryRecord] = (),
    min_freq: int = 1,
) -> Vocabulary:
    """Corpus-built vocabulary over all pin fields and query texts.

    Tokens are ranked by descending frequency (ties alphabetical) so ids are
    deterministic; the result is frozen before any training starts.
    """
    counts: Counter[str] = Counter()
    for pin in pins:
        for family in FIELD_ORDER:
            counts.update(family_tokens(pin, family))
    for query in queries:
        counts.update(tokenize(query.text))
    ranked = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary({t: NUM_RESERVED + i for i, t in enumerate(ranked)})


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token, token_id in sorted(vocab.token_to_id.items(), key=lambda kv: kv[1]):
            fh.write(json.dumps({"token": token, "id": token_id}, ensure_ascii=False))
            fh.write("\n")


def load_vocabulary(path: str | Path) -> Vocabulary:
    mapping: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            mapping[obj["token"]] = int(obj["id"])
    return Vocabulary(mapping)


@dataclass(frozen=True)
class TokenSeq:
    """Token ids with parallel segment ids (0 = query side, 1 = pin side)."""

    tokens: tuple[int, ...]
    segment_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.segment_ids):
            raise TextRepError("tokens and segment_ids must have equal length")
        if any(s not in (0, 1) for s in self.segment_ids):
            raise TextRepError("segment ids must be 0 or 1")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class TextRepConfig:
    max_len: int = 96
    field_order: tuple[str, ...] = FIELD_ORDER
    include_field_delimiters: bool = True

    def __post_init__(self) -> None:
        if self.max_len < 8:
            raise TextRepError(f"max_len must be >= 8, got {self.max_len}")
        unknown = set(self.field_order) - set(FIELD_ORDER)
        if unknown:
            raise TextRepError(f"unknown field families: {sorted(unknown)}")


def impute_title_description(pin: PinDocument) -> PinDocument:
    """Backfill empty title/description from the link title/description."""
    title = pin.title or pin.link_title
    description = pin.description or pin.link_description
    if title == pin.title and description == pin.description:
        return pin
    return replace(pin, title=title, description=description)


def family_tokens(pin: PinDocument, family: str, tokenizer=tokenize) -> list[str]:
    """Token strings contributed by one field family.

    Board titles are deduplicated in original order; engaged query tokens are
    re-tokenized defensively and deduplicated.
    """
    if family == "board_titles":
        seen: set[str] = set()
        tokens: list[str] = []
        for title in pin.board_titles:
            if title in seen:
                continue
            seen.add(title)
            tokens.extend(tokenizer(title))
        return tokens
    if family == "engaged_query_tokens":
        seen = set()
        tokens = []
        for raw in pin.engaged_query_tokens:
            for tok in tokenizer(raw):
                if tok not in seen:
                    seen.add(tok)
                    tokens.append(tok)
        return tokens
    return tokenizer(getattr(pin, family))


def _board_title_ids(pin: PinDocument, vocab: Vocabulary, delimited: bool) -> list[int]:
    # Individual board titles are kept apart with FIELD when delimiters are on.
    seen: set[str] = set()
    ids: list[int] = []
    for title in pin.board_titles:
        if title in seen:
            continue
        seen.add(title)
        title_ids = vocab.encode(tokenize(title))
        if not title_ids:
            continue
        if ids and delimited:
            ids.append(FIELD_ID)
        ids.extend(title_ids)
    return ids


def assemble_pin_text(
    pin: PinDocument, vocab: Vocabulary, config: TextRepConfig
) -> list[int]:
    """Concatenate tokenized field families in config order.

    Non-empty families are joined with the FIELD delimiter when enabled, and
    the result is truncated from the tail to config.max_len so earlier
    families keep priority.
    """
    ids: list[int] = []
    for family in config.field_order:
        if family == "board_titles":
            family_ids = _board_title_ids(pin, vocab, config.include_field_delimiters)
        else:
            family_ids = vocab.encode(family_tokens(pin, family))
        if not family_ids:
            continue
        if ids and config.include_field_delimiters:
            ids.append(FIELD_ID)
        ids.extend(family_ids)
        if len(ids) >= config.max_len:
            break
    return ids[: config.max_len]


def build_crossencoder_input(
    query_tokens: Sequence[int], pin_tokens: Sequence[int], max_len: int
) -> TokenSeq:
    """Joint input: query ++ SEP ++ pin, truncating only the pin tail.

    The query (with its SEP) must fit inside max_len; the pin segment may be
    empty after truncation.
    """
    if len(query_tokens) + 1 > max_len:
        raise TextRepError(
            f"query of {len(query_tokens)} tokens plus SEP exceeds max_len {max_len}"
        )
    budget = max_len - len(query_tokens) - 1
    pin_part = list(pin_tokens[:budget])
    tokens = tuple(query_tokens) + (SEP_ID,) + tuple(pin_part)
    segments = (0,) * (len(query_tokens) + 1) + (1,) * len(pin_part)
    return TokenSeq(tokens, segments)


def seq_arrays(seq: TokenSeq) -> tuple[np.ndarray, np.ndarray]:
    return np.asarray(seq.tokens, dtype=np.int64), np.asarray(seq.segment_ids, dtype=np.int64)
