"""Corpus data model and JSONL ingestion.

Stores are plain dataclasses loaded from JSONL files (one UTF-8 JSON object
per line). Loaders validate eagerly and report the offending line number or
id; loaded collections are treated as immutable afterward.

File formats (one record per line):

* pins.jsonl        {"pin_id", "title", "description", "link_title",
                     "link_description", "synthetic_caption",
                     "board_titles": [..], "engaged_query_tokens": [..],
                     "pin_embedding": [..]?, "categorical_attrs": {..},
                     "engagement_rate": {query_id: fraction}}
* queries.jsonl     {"query_id", "text", "query_embedding": [..]?}
* annotations.jsonl {"query_id", "pin_id", "ratings": [1..5, ...]}
* embeddings.jsonl  {"id", "vector": [..]}
* engagement_log.jsonl {"query_id", "pin_id", "repins", "long_clicks",
                        "impressions"}

All text fields default to the empty string, so downstream assembly never
has to branch on missing keys.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

NUM_LEVELS = 5

TEXT_FIELDS = (
    "title",
    "description",
    "link_title",
    "link_description",
    "synthetic_caption",
)


class CorpusError(ValueError):
    """Malformed or invariant-violating corpus input."""


@dataclass
class PinDocument:
    """A content item: six text field families plus embeddings and attributes."""

    pin_id: str
    title: str = ""
    description: str = ""
    link_title: str = ""
    link_description: str = ""
    synthetic_caption: str = ""
    board_titles: list[str] = field(default_factory=list)
    engaged_query_tokens: list[str] = field(default_factory=list)
    pin_embedding: list[float] | None = None
    categorical_attrs: dict[str, str] = field(default_factory=dict)
    engagement_rate: dict[str, float] = field(default_factory=dict)


@dataclass
class QueryRecord:
    query_id: str
    text: str
    query_embedding: list[float] | None = None


@dataclass
class RaterAnnotation:
    query_id: str
    pin_id: str
    ratings: list[int]


@dataclass(frozen=True)
class SoftLabel:
    """A probability distribution over the five relevance levels."""

    probs: tuple[float, float, float, float, float]

    def __post_init__(self) -> None:
        if len(self.probs) != NUM_LEVELS:
            raise CorpusError(f"soft label needs {NUM_LEVELS} entries, got {len(self.probs)}")
        if any(p < 0.0 for p in self.probs):
            raise CorpusError(f"soft label has negative entry: {self.probs}")
        total = sum(self.probs)
        if abs(total - 1.0) > 1e-9:
            raise CorpusError(f"soft label sums to {total!r}, expected 1")

    @classmethod
    def one_hot(cls, level: int) -> "SoftLabel":
        if not 1 <= level <= NUM_LEVELS:
            raise CorpusError(f"level must be in 1..{NUM_LEVELS}, got {level}")
        return cls(tuple(1.0 if c == level - 1 else 0.0 for c in range(NUM_LEVELS)))

    def argmax_level(self) -> int:
        """Most probable level in 1..5; ties break toward the lowest level."""
        best = 0
        for c in range(1, NUM_LEVELS):
            if self.probs[c] > self.probs[best]:
                best = c
        return best + 1

    def expected_gain(self) -> float:
        """Expectation of the 0/0.25/0.5/0.75/1.0 gain mapping."""
        return sum(p * 0.25 * c for c, p in enumerate(self.probs))


@dataclass
class LabeledExample:
    query_id: str
    pin_id: str
    label: SoftLabel
    source: str  # "human" | "teacher"


@dataclass
class EngagementRecord:
    query_id: str
    pin_id: str
    repins: int
    long_clicks: int
    impressions: int


# ---------------------------------------------------------------------------
# JSONL plumbing


def _iter_jsonl(path: str | Path) -> Iterable[tuple[int, dict]]:
    """Yield (line_number, parsed object); blank lines are skipped."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: malformed JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise CorpusError(f"{path}: line {lineno}: expected a JSON object")
            yield lineno, obj


def _write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False))
            fh.write("\n")


def _require_str(obj: dict, key: str, where: str, default: str | None = None) -> str:
    value = obj.get(key, default)
    if not isinstance(value, str):
        raise CorpusError(f"{where}: field {key!r} must be a string")
    return value


def _str_list(obj: dict, key: str, where: str) -> list[str]:
    value = obj.get(key, [])
    if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
        raise CorpusError(f"{where}: field {key!r} must be a list of strings")
    return list(value)


def _float_vector(value, where: str) -> list[float]:
    if not isinstance(value, list) or any(not isinstance(v, (int, float)) for v in value):
        raise CorpusError(f"{where}: vector must be a list of numbers")
    return [float(v) for v in value]


def _dedupe(items: Sequence[str]) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    for item in items:
        if item not in seen:
            seen.add(item)
            out.append(item)
    return out


# ---------------------------------------------------------------------------
# Loaders


def load_pins(path: str | Path) -> list[PinDocument]:
    """Load pins.jsonl. Duplicate pin_id or malformed lines raise CorpusError."""
    pins: list[PinDocument] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        where = f"{path}: line {lineno}"
        pin_id = _require_str(obj, "pin_id", where)
        if not pin_id:
            raise CorpusError(f"{where}: pin_id must be non-empty")
        if pin_id in seen:
            raise CorpusError(f"{where}: duplicate pin_id {pin_id!r}")
        seen.add(pin_id)

        texts = {name: _require_str(obj, name, where, default="") for name in TEXT_FIELDS}
        embedding = obj.get("pin_embedding")
        if embedding is not None:
            embedding = _float_vector(embedding, f"{where}: pin_embedding")

        attrs = obj.get("categorical_attrs", {})
        if not isinstance(attrs, dict) or any(
            not isinstance(k, str) or not isinstance(v, str) for k, v in attrs.items()
        ):
            raise CorpusError(f"{where}: categorical_attrs must map strings to strings")

        rates = obj.get("engagement_rate", {})
        if not isinstance(rates, dict):
            raise CorpusError(f"{where}: engagement_rate must be an object")
        engagement: dict[str, float] = {}
        for qid, rate in rates.items():
            if not isinstance(rate, (int, float)) or not 0.0 <= rate <= 1.0:
                raise CorpusError(f"{where}: engagement_rate[{qid!r}] must be in [0, 1]")
            engagement[str(qid)] = float(rate)

        pins.append(
            PinDocument(
                pin_id=pin_id,
                title=texts["title"],
                description=texts["description"],
                link_title=texts["link_title"],
                link_description=texts["link_description"],
                synthetic_caption=texts["synthetic_caption"],
                board_titles=_str_list(obj, "board_titles", where),
                engaged_query_tokens=_dedupe(_str_list(obj, "engaged_query_tokens", where)),
                pin_embedding=embedding,
                categorical_attrs=dict(attrs),
                engagement_rate=engagement,
            )
        )
    return pins


def save_pins(pins: Iterable[PinDocument], path: str | Path) -> None:
    _write_jsonl(
        path,
        (
            {
                "pin_id": p.pin_id,
                "title": p.title,
                "description": p.description,
                "link_title": p.link_title,
                "link_description": p.link_description,
                "synthetic_caption": p.synthetic_caption,
                "board_titles": p.board_titles,
                "engaged_query_tokens": p.engaged_query_tokens,
                "pin_embedding": p.pin_embedding,
                "categorical_attrs": p.categorical_attrs,
                "engagement_rate": p.engagement_rate,
            }
            for p in pins
        ),
    )


def load_queries(path: str | Path) -> list[QueryRecord]:
    """Load queries.jsonl. Empty (post-trim) query text raises CorpusError."""
    queries: list[QueryRecord] = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        where = f"{path}: line {lineno}"
        query_id = _require_str(obj, "query_id", where)
        if not query_id:
            raise CorpusError(f"{where}: query_id must be non-empty")
        if query_id in seen:
            raise CorpusError(f"{where}: duplicate query_id {query_id!r}")
        seen.add(query_id)
        text = _require_str(obj, "text", where).strip()
        if not text:
            raise CorpusError(f"{where}: query text must be non-empty")
        embedding = obj.get("query_embedding")
        if embedding is not None:
            embedding = _float_vector(embedding, f"{where}: query_embedding")
        queries.append(QueryRecord(query_id=query_id, text=text, query_embedding=embedding))
    return queries


def save_queries(queries: Iterable[QueryRecord], path: str | Path) -> None:
    _write_jsonl(
        path,
        (
            {"query_id": q.query_id, "text": q.text, "query_embedding": q.query_embedding}
            for q in queries
        ),
    )


def load_annotations(path: str | Path) -> list[RaterAnnotation]:
    annotations: list[RaterAnnotation] = []
    for lineno, obj in _iter_jsonl(path):
        where = f"{path}: line {lineno}"
        ratings = obj.get("ratings")
        if not isinstance(ratings, list) or not ratings:
            raise CorpusError(f"{where}: ratings must be a non-empty list")
        for r in ratings:
            if not isinstance(r, int) or isinstance(r, bool) or not 1 <= r <= NUM_LEVELS:
                raise CorpusError(f"{where}: rating {r!r} outside 1..{NUM_LEVELS}")
        annotations.append(
            RaterAnnotation(
                query_id=_require_str(obj, "query_id", where),
                pin_id=_require_str(obj, "pin_id", where),
                ratings=list(ratings),
            )
        )
    return annotations


def save_annotations(annotations: Iterable[RaterAnnotation], path: str | Path) -> None:
    _write_jsonl(
        path,
        ({"query_id": a.query_id, "pin_id": a.pin_id, "ratings": a.ratings} for a in annotations),
    )


def load_embedding_store(path: str | Path, expected_dim: int) -> dict[str, list[float]]:
    """Load embeddings.jsonl into an id -> vector map, checking dimensions."""
    store: dict[str, list[float]] = {}
    for lineno, obj in _iter_jsonl(path):
        where = f"{path}: line {lineno}"
        entry_id = _require_str(obj, "id", where)
        if entry_id in store:
            raise CorpusError(f"{where}: duplicate embedding id {entry_id!r}")
        vector = _float_vector(obj.get("vector"), where)
        if len(vector) != expected_dim:
            raise CorpusError(
                f"{where}: embedding for id {entry_id!r} has dim {len(vector)}, expected {expected_dim}"
            )
        store[entry_id] = vector
    return store


def save_embedding_store(store: dict[str, list[float]], path: str | Path) -> None:
    _write_jsonl(path, ({"id": k, "vector": v} for k, v in store.items()))


def load_engagement_log(path: str | Path) -> list[EngagementRecord]:
    records: list[EngagementRecord] = []
    for lineno, obj in _iter_jsonl(path):
        where = f"{path}: line {lineno}"
        counts = {}
        for key in ("repins", "long_clicks", "impressions"):
            value = obj.get(key, 0)
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                raise CorpusError(f"{where}: {key} must be a non-negative integer")
            counts[key] = value
        records.append(
            EngagementRecord(
                query_id=_require_str(obj, "query_id", where),
                pin_id=_require_str(obj, "pin_id", where),
                **counts,
            )
        )
    return records


def save_engagement_log(records: Iterable[EngagementRecord], path: str | Path) -> None:
    _write_jsonl(
        path,
        (
            {
                "query_id": r.query_id,
                "pin_id": r.pin_id,
                "repins": r.repins,
                "long_clicks": r.long_clicks,
                "impressions": r.impressions,
            }
            for r in records
        ),
    )


def apply_engagement_rates(
    pins: Sequence[PinDocument], records: Sequence[EngagementRecord]
) -> list[PinDocument]:
    """Fold an engagement log into per-pin engagement-rate maps.

    rate(query, pin) = (repins + long_clicks) / impressions, clipped to [0, 1];
    pairs with zero impressions get rate 0. Duplicate (query, pin) rows are
    summed before the ratio is taken. Returns new documents; inputs untouched.
    """
    sums: dict[tuple[str, str], list[int]] = {}
    for rec in records:
        entry = sums.setdefault((rec.query_id, rec.pin_id), [0, 0, 0])
        entry[0] += rec.repins
        entry[1] += rec.long_clicks
        entry[2] += rec.impressions

    by_pin: dict[str, dict[str, float]] = {}
    for (query_id, pin_id), (repins, long_clicks, impressions) in sums.items():
        rate = 0.0 if impressions == 0 else min(1.0, (repins + long_clicks) / impressions)
        by_pin.setdefault(pin_id, {})[query_id] = rate

    return [
        replace(pin, engagement_rate={**pin.engagement_rate, **by_pin.get(pin.pin_id, {})})
        for pin in pins
    ]


def index_by_id(items: Iterable, key: str) -> dict:
    return {getattr(item, key): item for item in items}


# ---------------------------------------------------------------------------
# Label aggregation and splitting


def aggregate_soft_label(annotation: RaterAnnotation) -> SoftLabel:
    """Mean of the one-hot vectors of the individual ratings."""
    if not annotation.ratings:
        raise CorpusError("annotation has no ratings")
    counts = [0] * NUM_LEVELS
    for rating in annotation.ratings:
        if not 1 <= rating <= NUM_LEVELS:
            raise CorpusError(f"rating {rating!r} outside 1..{NUM_LEVELS}")
        counts[rating - 1] += 1
    n = len(annotation.ratings)
    return SoftLabel(tuple(c / n for c in counts))


def split_hash64(query_id: str, seed: int) -> int:
    """Stable 64-bit hash of a query id salted with a seed.

    blake2b with an 8-byte digest, keyed by the seed's low 64 bits in
    little-endian order, over the UTF-8 bytes of the query id. Frozen test
    vectors live in the test suite; splits are portable across platforms.
    """
    key = (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    digest = hashlib.blake2b(query_id.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


def split_unit(query_id: str, seed: int) -> float:
    """Map the split hash to [0, 1)."""
    return split_hash64(query_id, seed) / 2.0**64


def split_by_query(
    examples: Sequence[LabeledExample], test_fraction: float, seed: int
) -> tuple[list[LabeledExample], list[LabeledExample]]:
    """Deterministic query-level train/test partition.

    An example lands in the test side iff split_unit(query_id, seed) is below
    test_fraction, so every example of a given query lands on the same side
    and the split depends on nothing but (query_id, seed).
    """
    if not 0.0 <= test_fraction <= 1.0:
        raise CorpusError(f"test_fraction must be in [0, 1], got {test_fraction}")
    train: list[LabeledExample] = []
    test: list[LabeledExample] = []
    for example in examples:
        if split_unit(example.query_id, seed) < test_fraction:
            test.append(example)
        else:
            train.append(example)
    return train, test


def human_examples(annotations: Sequence[RaterAnnotation]) -> list[LabeledExample]:
    """Aggregate rater annotations into human-sourced labeled examples."""
    return [
        LabeledExample(a.query_id, a.pin_id, aggregate_soft_label(a), source="human")
        for a in annotations
    ]


def load_examples(path: str | Path) -> list[LabeledExample]:
    """Load a labeled-example pool (human- or teacher-sourced)."""
    examples: list[LabeledExample] = []
    for lineno, obj in _iter_jsonl(path):
        where = f"{path}: line {lineno}"
        probs = obj.get("probs")
        if not isinstance(probs, list) or len(probs) != NUM_LEVELS:
            raise CorpusError(f"{where}: probs must be a list of {NUM_LEVELS} floats")
        source = _require_str(obj, "source", where)
        if source not in ("human", "teacher"):
            raise CorpusError(f"{where}: source must be 'human' or 'teacher', got {source!r}")
        try:
            label = SoftLabel(tuple(float(p) for p in probs))
        except CorpusError as exc:
            raise CorpusError(f"{where}: {exc}") from exc
        examples.append(
            LabeledExample(
                query_id=_require_str(obj, "query_id", where),
                pin_id=_require_str(obj, "pin_id", where),
                label=label,
                source=source,
            )
        )
    return examples


def save_examples(examples: Iterable[LabeledExample], path: str | Path) -> None:
    _write_jsonl(
        path,
        (
            {
                "query_id": e.query_id,
                "pin_id": e.pin_id,
                "probs": list(e.label.probs),
                "source": e.source,
            }
            for e in examples
        ),
    )
