"""Student feature extraction.

Per (query, pin) pair: Okapi BM25 per text field family, token-overlap
fractions, the historical engagement rate, precomputed query/pin embeddings
(zero vector plus a presence flag when missing), and categorical attribute
ids. The feature layout (group order, dims, categorical vocabularies) is a
hashable descriptor shared between the extractor and the student model so a
checkpoint can refuse mismatched inputs.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .corpus import PinDocument, QueryRecord
from .textrep import family_tokens, impute_title_description, tokenize

# Field families scored by BM25 and token overlap (engaged query tokens are
# query-side text and are left to the overlap of the fields they engage).
BM25_FIELDS = (
    "synthetic_caption",
    "title",
    "description",
    "link_title",
    "link_description",
    "board_titles",
)

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75

FLAG_NAMES = ("has_query_embedding", "has_pin_embedding")


class FeatureError(ValueError):
    pass


@dataclass
class FieldStats:
    df: dict[str, int]
    avgdl: float


@dataclass
class Bm25Index:
    """Per-field document frequencies and length statistics."""

    n_docs: int
    k1: float
    b: float
    fields: dict[str, FieldStats]


def build_bm25_index(
    pins: Sequence[PinDocument],
    tokenizer: Callable[[str], list[str]] = tokenize,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> Bm25Index:
    """Collect df, avgdl and corpus size per field family.

    Documents are title/description-imputed first, matching the text the
    teacher sees. avgdl averages over all documents, so a field that is
    empty everywhere records avgdl 0 and scores 0.
    """
    if not pins:
        raise FeatureError("cannot build a BM25 index over an empty corpus")
    fields: dict[str, FieldStats] = {}
    for field in BM25_FIELDS:
        df: dict[str, int] = {}
        total_len = 0
        for pin in pins:
            tokens = family_tokens(impute_title_description(pin), field, tokenizer)
            total_len += len(tokens)
            for token in set(tokens):
                df[token] = df.get(token, 0) + 1
        fields[field] = FieldStats(df=df, avgdl=total_len / len(pins))
    return Bm25Index(n_docs=len(pins), k1=k1, b=b, fields=fields)


def bm25_idf(index: Bm25Index, field: str, token: str) -> float:
    """Non-negative idf: ln(1 + (N - df + 0.5) / (df + 0.5))."""
    df = index.fields[field].df.get(token, 0)
    return math.log(1.0 + (index.n_docs - df + 0.5) / (df + 0.5))


def bm25_score(
    index: Bm25Index,
    field: str,
    query_tokens: Sequence[str],
    doc_field_tokens: Sequence[str],
) -> float:
    """Okapi BM25 over unique query tokens against one document field."""
    if field not in index.fields:
        raise FeatureError(f"unknown BM25 field {field!r}")
    counts = Counter(doc_field_tokens)
    return _bm25_from_counts(index, field, query_tokens, counts, len(doc_field_tokens))


def _bm25_from_counts(
    index: Bm25Index,
    field: str,
    query_tokens: Sequence[str],
    doc_counts: Mapping[str, int],
    doc_len: int,
) -> float:
    stats = index.fields[field]
    if stats.avgdl <= 0.0:
        return 0.0
    norm = index.k1 * (1.0 - index.b + index.b * doc_len / stats.avgdl)
    score = 0.0
    for token in dict.fromkeys(query_tokens):  # unique, original order
        tf = doc_counts.get(token, 0)
        if tf == 0:
            continue
        score += bm25_idf(index, field, token) * tf * (index.k1 + 1.0) / (tf + norm)
    return score


def overlap_fraction(query_tokens: Sequence[str], field_tokens: Sequence[str]) -> float:
    """|unique(query) ∩ unique(field)| / |unique(query)|; 0 for empty queries."""
    q = set(query_tokens)
    if not q:
        return 0.0
    return len(q & set(field_tokens)) / len(q)


def numerical_embed(x: float, w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Linear transform of a scalar feature into an embedding: x * w + v."""
    return float(x) * np.asarray(w, dtype=np.float64) + np.asarray(v, dtype=np.float64)


# ---------------------------------------------------------------------------
# Index serialization (documented JSON, bit-reproducible)


def save_bm25_index(index: Bm25Index, path: str | Path) -> None:
    payload = {
        "version": 1,
        "n_docs": index.n_docs,
        "k1": index.k1,
        "b": index.b,
        "fields": {
            name: {"avgdl": stats.avgdl, "df": dict(sorted(stats.df.items()))}
            for name, stats in index.fields.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        fh.write("\n")


def load_bm25_index(path: str | Path) -> Bm25Index:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != 1:
        raise FeatureError(f"{path}: unsupported BM25 index version {payload.get('version')!r}")
    return Bm25Index(
        n_docs=int(payload["n_docs"]),
        k1=float(payload["k1"]),
        b=float(payload["b"]),
        fields={
            name: FieldStats(df={t: int(c) for t, c in entry["df"].items()}, avgdl=float(entry["avgdl"]))
            for name, entry in payload["fields"].items()
        },
    )


# ---------------------------------------------------------------------------
# Feature layout and assembly


def numerical_feature_names() -> tuple[str, ...]:
    names = [f"bm25:{f}" for f in BM25_FIELDS]
    names += [f"overlap:{f}" for f in BM25_FIELDS]
    names.append("engagement_rate")
    return tuple(names)


@dataclass(frozen=True)
class FeatureLayout:
    """Input layout descriptor: group order, dims, categorical vocabularies."""

    d_query_emb: int
    d_pin_emb: int
    numerical_names: tuple[str, ...]
    d_num: int
    categorical: tuple[tuple[str, tuple[str, ...]], ...]
    d_cat: int
    flag_names: tuple[str, ...] = FLAG_NAMES

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "d_query_emb": self.d_query_emb,
            "d_pin_emb": self.d_pin_emb,
            "numerical_names": list(self.numerical_names),
            "d_num": self.d_num,
            "categorical": [{"name": n, "values": list(vs)} for n, vs in self.categorical],
            "d_cat": self.d_cat,
            "flag_names": list(self.flag_names),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureLayout":
        return cls(
            d_query_emb=int(obj["d_query_emb"]),
            d_pin_emb=int(obj["d_pin_emb"]),
            numerical_names=tuple(obj["numerical_names"]),
            d_num=int(obj["d_num"]),
            categorical=tuple((e["name"], tuple(e["values"])) for e in obj["categorical"]),
            d_cat=int(obj["d_cat"]),
            flag_names=tuple(obj["flag_names"]),
        )

    def layout_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    @property
    def n_numerical(self) -> int:
        return len(self.numerical_names)

    @property
    def input_dim(self) -> int:
        """Width of the concatenated student trunk input."""
        return (
            self.d_query_emb
            + self.d_pin_emb
            + self.n_numerical * self.d_num
            + len(self.categorical) * self.d_cat
            + len(self.flag_names)
        )


def build_feature_layout(
    pins: Sequence[PinDocument],
    d_query_emb: int,
    d_pin_emb: int,
    d_num: int = 8,
    d_cat: int = 8,
) -> FeatureLayout:
    """Derive the layout from a corpus: categorical vocabularies are the
    sorted observed values per attribute name."""
    values: dict[str, set[str]] = {}
    for pin in pins:
        for name, value in pin.categorical_attrs.items():
            values.setdefault(name, set()).add(value)
    categorical = tuple((name, tuple(sorted(values[name]))) for name in sorted(values))
    return FeatureLayout(
        d_query_emb=d_query_emb,
        d_pin_emb=d_pin_emb,
        numerical_names=numerical_feature_names(),
        d_num=d_num,
        categorical=categorical,
        d_cat=d_cat,
    )


@dataclass
class StudentFeatureVector:
    query_embedding: np.ndarray
    pin_embedding: np.ndarray
    bm25: np.ndarray
    overlap: np.ndarray
    engagement_rate: float
    flags: np.ndarray
    categorical_ids: tuple[int, ...]
    layout_hash: str


class FeatureExtractor:
    """Assembles StudentFeatureVectors; total by design (missing data maps
    to zeros and presence flags, never errors).

    Tokenized pin fields are memoized per document object, so repeated
    scoring of a stored corpus costs one tokenization pass. Documents are
    treated as immutable, as corpus stores guarantee.
    """

    def __init__(
        self,
        index: Bm25Index,
        layout: FeatureLayout,
        query_embeddings: Mapping[str, Sequence[float]] | None = None,
        pin_embeddings: Mapping[str, Sequence[float]] | None = None,
    ) -> None:
        self.index = index
        self.layout = layout
        self.query_embeddings = dict(query_embeddings or {})
        self.pin_embeddings = dict(pin_embeddings or {})
        self._cat_maps = [
            {value: i for i, value in enumerate(values)} for _, values in layout.categorical
        ]
        self._hash = layout.layout_hash()
        self._pin_cache: dict[int, tuple[PinDocument, dict]] = {}
        self._query_cache: dict[int, tuple[QueryRecord, list[str]]] = {}

    def _pin_entry(self, pin: PinDocument) -> dict:
        key = id(pin)
        hit = self._pin_cache.get(key)
        if hit is not None:
            return hit[1]
        imputed = impute_title_description(pin)
        entry: dict = {"fields": {}}
        for field in BM25_FIELDS:
            tokens = family_tokens(imputed, field)
            entry["fields"][field] = (Counter(tokens), len(tokens), set(tokens))
        self._pin_cache[key] = (pin, entry)
        return entry

    def _query_tokens(self, query: QueryRecord) -> list[str]:
        key = id(query)
        hit = self._query_cache.get(key)
        if hit is not None:
            return hit[1]
        tokens = tokenize(query.text)
        self._query_cache[key] = (query, tokens)
        return tokens

    def _lookup_embedding(
        self,
        store: Mapping[str, Sequence[float]],
        entry_id: str,
        inline: Sequence[float] | None,
        dim: int,
    ) -> tuple[np.ndarray, float]:
        vector = store.get(entry_id)
        if vector is None:
            vector = inline
        if vector is None or len(vector) != dim:
            return np.zeros(dim, dtype=np.float64), 0.0
        return np.asarray(vector, dtype=np.float64), 1.0

    def assemble(self, query: QueryRecord, pin: PinDocument) -> StudentFeatureVector:
        q_tokens = self._query_tokens(query)
        entry = self._pin_entry(pin)

        bm25 = np.empty(len(BM25_FIELDS), dtype=np.float64)
        overlap = np.empty(len(BM25_FIELDS), dtype=np.float64)
        q_unique = set(q_tokens)
        for i, field in enumerate(BM25_FIELDS):
            counts, doc_len, token_set = entry["fields"][field]
            bm25[i] = _bm25_from_counts(self.index, field, q_tokens, counts, doc_len)
            overlap[i] = len(q_unique & token_set) / len(q_unique) if q_unique else 0.0

        q_emb, q_flag = self._lookup_embedding(
            self.query_embeddings, query.query_id, query.query_embedding, self.layout.d_query_emb
        )
        p_emb, p_flag = self._lookup_embedding(
            self.pin_embeddings, pin.pin_id, pin.pin_embedding, self.layout.d_pin_emb
        )

        cat_ids = []
        for (name, values), mapping in zip(self.layout.categorical, self._cat_maps):
            value = pin.categorical_attrs.get(name)
            cat_ids.append(mapping.get(value, len(values)))  # last row = out-of-vocabulary

        return StudentFeatureVector(
            query_embedding=q_emb,
            pin_embedding=p_emb,
            bm25=bm25,
            overlap=overlap,
            engagement_rate=pin.engagement_rate.get(query.query_id, 0.0),
            flags=np.array([q_flag, p_flag], dtype=np.float64),
            categorical_ids=tuple(cat_ids),
            layout_hash=self._hash,
        )


def assemble_features(
    extractor: FeatureExtractor, query: QueryRecord, pin: PinDocument
) -> StudentFeatureVector:
    return extractor.assemble(query, pin)
