"""Distillation orchestration and the synthetic verification corpus.

Three jobs live here: pseudo-labeling an engagement pool with a teacher
scorer, stratified sampling of the labeled pool to a balanced class mix,
and the experiment drivers (scaling over distilled-set sizes, text-field
ablation). The synthetic generator provides the corpus all trend-level
checks run against: query-pin relevance has a known tiered ground truth,
so accuracy against the oracle is exact rather than estimated.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .corpus import (
    NUM_LEVELS,
    EngagementRecord,
    LabeledExample,
    PinDocument,
    QueryRecord,
    RaterAnnotation,
    SoftLabel,
    aggregate_soft_label,
    split_unit,
)
from .evalmetrics import EvalReport
from .features import FeatureExtractor, FeatureLayout
from .student import FeatureBatch, StudentTrainConfig, eval_student, train_student
from .teacher import (
    CrossEncoderModel,
    TeacherScorer,
    TeacherTrainConfig,
    build_teacher_dataset,
    eval_teacher,
    train_teacher,
)
from .textrep import FIELD_ORDER, TextRepConfig, Vocabulary, build_vocabulary

logger = logging.getLogger(__name__)


class PipelineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Pseudo-labeling


@dataclass(frozen=True)
class UnlabeledPair:
    query_id: str
    pin_id: str
    weight: int = 1  # engagement count; informational, not used for sampling


def pairs_from_engagement(records: Sequence[EngagementRecord]) -> list[UnlabeledPair]:
    return [
        UnlabeledPair(r.query_id, r.pin_id, weight=max(1, r.impressions)) for r in records
    ]


def label_pool(
    scorer: TeacherScorer,
    pairs: Sequence[UnlabeledPair],
    queries_by_id: Mapping[str, QueryRecord],
    pins_by_id: Mapping[str, PinDocument],
) -> tuple[list[LabeledExample], dict[str, int]]:
    """Teacher-label every resolvable pair, preserving input order.

    Unresolvable ids are skipped with a warning and counted in the returned
    skip report; len(labeled) + skipped == len(pairs) always holds.
    """
    resolved: list[UnlabeledPair] = []
    skips = {"missing_query": 0, "missing_pin": 0}
    for pair in pairs:
        if pair.query_id not in queries_by_id:
            skips["missing_query"] += 1
            logger.warning("label_pool: unknown query_id %r, skipping", pair.query_id)
            continue
        if pair.pin_id not in pins_by_id:
            skips["missing_pin"] += 1
            logger.warning("label_pool: unknown pin_id %r, skipping", pair.pin_id)
            continue
        resolved.append(pair)

    score_many = getattr(scorer, "score_many", None)
    if callable(score_many):
        labels = score_many(
            [queries_by_id[p.query_id].text for p in resolved],
            [pins_by_id[p.pin_id] for p in resolved],
        )
    else:
        labels = [
            scorer.score(queries_by_id[p.query_id].text, pins_by_id[p.pin_id])
            for p in resolved
        ]
    examples = [
        LabeledExample(p.query_id, p.pin_id, label, source="teacher")
        for p, label in zip(resolved, labels)
    ]
    return examples, skips


# ---------------------------------------------------------------------------
# Stratified sampling


@dataclass(frozen=True)
class SamplingSpec:
    target_total: int
    target_distribution: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.target_total <= 0:
            raise PipelineError(f"target_total must be positive, got {self.target_total}")
        if len(self.target_distribution) != NUM_LEVELS:
            raise PipelineError("target_distribution needs 5 fractions")
        if any(f < 0 for f in self.target_distribution):
            raise PipelineError("target_distribution fractions must be >= 0")
        if abs(sum(self.target_distribution) - 1.0) > 1e-9:
            raise PipelineError(
                f"target_distribution sums to {sum(self.target_distribution)!r}"
            )


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_sample(
    pool: Sequence[LabeledExample], spec: SamplingSpec
) -> tuple[list[LabeledExample], dict]:
    """Seeded without-replacement sample hitting per-class quotas exactly.

    An example's class is the argmax of its soft label (ties toward the
    lowest level). Per-class quota = round(target_total * fraction), half
    away from zero. A class short of its quota contributes everything it
    has; the shortfall is reported, never redistributed to other classes.
    Output preserves the pool's relative order, so a fixed (pool, spec) is
    byte-identical run to run.
    """
    if not pool:
        raise PipelineError("pool is empty")
    by_class: dict[int, list[int]] = {level: [] for level in range(1, NUM_LEVELS + 1)}
    for i, example in enumerate(pool):
        by_class[example.label.argmax_level()].append(i)

    rng = np.random.default_rng(spec.seed)
    chosen: list[int] = []
    report = {"quota": {}, "available": {}, "taken": {}, "shortfall": {}}
    for level in range(1, NUM_LEVELS + 1):
        quota = _round_half_up(spec.target_total * spec.target_distribution[level - 1])
        candidates = by_class[level]
        take = min(quota, len(candidates))
        if take == len(candidates):
            picked = list(candidates)
        else:
            picked = [candidates[j] for j in rng.choice(len(candidates), take, replace=False)]
        chosen.extend(picked)
        report["quota"][level] = quota
        report["available"][level] = len(candidates)
        report["taken"][level] = take
        report["shortfall"][level] = quota - take
    chosen.sort()
    return [pool[i] for i in chosen], report


# ---------------------------------------------------------------------------
# Feature assembly for labeled examples


def features_for_examples(
    extractor: FeatureExtractor,
    examples: Sequence[LabeledExample],
    queries_by_id: Mapping[str, QueryRecord],
    pins_by_id: Mapping[str, PinDocument],
) -> tuple[FeatureBatch, list[str]]:
    """FeatureBatch + aligned query-id list for a set of labeled examples."""

    def rows():
        for ex in examples:
            query = queries_by_id.get(ex.query_id)
            pin = pins_by_id.get(ex.pin_id)
            if query is None:
                raise PipelineError(f"unknown query_id {ex.query_id!r}")
            if pin is None:
                raise PipelineError(f"unknown pin_id {ex.pin_id!r}")
            yield extractor.assemble(query, pin), ex.label

    batch = FeatureBatch.from_pairs(rows(), extractor.layout)
    return batch, [ex.query_id for ex in examples]


def example_set_hash(examples: Sequence[LabeledExample]) -> str:
    """Order-sensitive content hash of a labeled example list."""
    h = hashlib.sha256()
    for ex in examples:
        h.update(
            json.dumps(
                [ex.query_id, ex.pin_id, list(ex.label.probs), ex.source],
                sort_keys=True,
            ).encode("utf-8")
        )
        h.update(b"\n")
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Scaling experiment


def run_scaling_experiment(
    pool: Sequence[LabeledExample],
    sizes: Sequence[int],
    test_examples: Sequence[LabeledExample],
    extractor: FeatureExtractor,
    queries_by_id: Mapping[str, QueryRecord],
    pins_by_id: Mapping[str, PinDocument],
    train_config: StudentTrainConfig,
    sampling_seed: int = 0,
    target_distribution: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2),
    valid_fraction: float = 0.05,
) -> list[dict]:
    """Student accuracy/AUROC as a function of distilled training-set size.

    Every size trains on a stratified sample of the same pool and evaluates
    on the same fixed test set; rows carry the test-set hash so a report
    proves the comparison was apples to apples.
    """
    if list(sizes) != sorted(sizes):
        raise PipelineError("sizes must be ascending")
    if not test_examples:
        raise PipelineError("test set is empty")

    test_batch, test_qids = features_for_examples(
        extractor, test_examples, queries_by_id, pins_by_id
    )
    test_hash = example_set_hash(test_examples)
    rows = []
    for size in sizes:
        spec = SamplingSpec(
            target_total=size, target_distribution=target_distribution, seed=sampling_seed
        )
        sample, report = stratified_sample(pool, spec)
        if len(sample) < size:
            raise PipelineError(
                f"pool cannot fill size {size}: got {len(sample)} "
                f"(shortfall {report['shortfall']})"
            )
        n_valid = max(1, int(len(sample) * valid_fraction))
        train_part, valid_part = sample[n_valid:], sample[:n_valid]
        train_batch, _ = features_for_examples(
            extractor, train_part, queries_by_id, pins_by_id
        )
        valid_batch, _ = features_for_examples(
            extractor, valid_part, queries_by_id, pins_by_id
        )
        model, _ = train_student(train_batch, valid_batch, train_config, extractor.layout)
        result = eval_student(model, test_batch, query_ids=test_qids)
        rows.append(
            {
                "size": size,
                "accuracy": result.accuracy,
                "auroc_3plus": result.auroc_3plus,
                "auroc_4plus": result.auroc_4plus,
                "auroc_5plus": result.auroc_5plus,
                "test_set_hash": test_hash,
            }
        )
        logger.info("scaling size %d: accuracy %.4f", size, result.accuracy)
    return rows


# ---------------------------------------------------------------------------
# Synthetic verification corpus

TIER_THRESHOLDS = (0.05, 0.275, 0.525, 0.775)
TIER_CENTERS = (0.0, 0.15, 0.40, 0.65, 0.90)
TIER_JITTER = 0.03

# Fraction of a pin's topic-token evidence carried by each field family.
FIELD_SHARES = {
    "synthetic_caption": 0.15,
    "title": 0.12,
    "description": 0.25,
    "link_title": 0.08,
    "link_description": 0.20,
    "board_titles": 0.12,
    "engaged_query_tokens": 0.08,
}


def tier_of(affinity: float) -> int:
    """Deterministic tier of a query-pin affinity in [0, 1]."""
    for level, threshold in enumerate(TIER_THRESHOLDS, start=1):
        if affinity < threshold:
            return level
    return NUM_LEVELS


@dataclass(frozen=True)
class SyntheticConfig:
    n_queries: int = 1000
    n_pins: int = 5000
    seed: int = 0
    vocab_size: int = 4000
    n_topics: int = 8
    query_tokens: int = 3
    pin_tokens: int = 40
    tier_priors: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    n_raters: int = 3
    rater_flip: float = 0.1
    ann_per_query: int = 5
    engagement_per_query: int = 30
    engagement_tier_priors: tuple[float, ...] = (0.14, 0.16, 0.20, 0.24, 0.26)
    d_query_emb: int = 16
    d_pin_emb: int = 16
    missing_query_emb: float = 0.05
    missing_pin_emb: float = 0.08
    moved_title: float = 0.05
    moved_description: float = 0.05

    def __post_init__(self) -> None:
        if self.n_topics < 2 or self.vocab_size < 4 * self.n_topics:
            raise PipelineError("need at least 2 topics and 4 tokens per topic")
        if abs(sum(self.tier_priors) - 1.0) > 1e-9 or len(self.tier_priors) != NUM_LEVELS:
            raise PipelineError("tier_priors must be 5 fractions summing to 1")
        if not 0.0 <= self.rater_flip <= 1.0:
            raise PipelineError("rater_flip must be in [0, 1]")


@dataclass
class SyntheticCorpus:
    """Generated stores plus the latent state that defines ground truth."""

    pins: list[PinDocument]
    queries: list[QueryRecord]
    annotations: list[RaterAnnotation]
    engagement: list[EngagementRecord]
    query_topic: dict[str, int]
    pin_composition: dict[str, tuple[float, ...]]
    config: SyntheticConfig

    def truth_level(self, query_id: str, pin_id: str) -> int:
        """Oracle: tier of the pin's composition mass on the query's topic."""
        topic = self.query_topic[query_id]
        return tier_of(self.pin_composition[pin_id][topic])

    def queries_by_id(self) -> dict[str, QueryRecord]:
        return {q.query_id: q for q in self.queries}

    def pins_by_id(self) -> dict[str, PinDocument]:
        return {p.pin_id: p for p in self.pins}


def largest_remainder(weights: Sequence[float], total: int) -> list[int]:
    """Integer allocation of `total` proportional to weights; exact sum."""
    w = np.asarray(weights, dtype=np.float64)
    if total < 0 or w.sum() <= 0:
        raise PipelineError("allocation needs total >= 0 and positive weight mass")
    exact = w / w.sum() * total
    base = np.floor(exact).astype(np.int64)
    remainder = exact - base
    missing = total - int(base.sum())
    if missing:
        for i in np.argsort(-remainder, kind="stable")[:missing]:
            base[i] += 1
    return [int(c) for c in base]


def _topic_pools(config: SyntheticConfig) -> tuple[list[list[str]], list[str]]:
    per_topic = config.vocab_size // (2 * config.n_topics)
    pools = [
        [f"t{t}w{i}" for i in range(per_topic)] for t in range(config.n_topics)
    ]
    n_background = config.vocab_size - config.n_topics * per_topic
    background = [f"bgw{i}" for i in range(n_background)]
    return pools, background


def _pin_affinity(rng: np.random.Generator, topic: int, tier: int, config: SyntheticConfig):
    """Composition over [topics..., background]; designated component sits
    safely inside its tier band (thresholds padded by the jitter width)."""
    center = TIER_CENTERS[tier - 1]
    if tier == 1:
        c = rng.uniform(0.0, TIER_JITTER)
    else:
        c = center + rng.uniform(-TIER_JITTER, TIER_JITTER)
    affinity = np.zeros(config.n_topics + 1)
    affinity[topic] = c
    rest = rng.dirichlet(np.ones(config.n_topics - 1)) * (1.0 - c) * 0.5
    others = [t for t in range(config.n_topics) if t != topic]
    affinity[others] = rest
    affinity[-1] = 1.0 - affinity[:-1].sum()  # background absorbs the remainder
    return affinity


def _allocate_fields(
    rng: np.random.Generator, tokens: list[str]
) -> dict[str, list[str]]:
    """Partition a pin's token multiset across field families by fixed shares.

    The multiset is shuffled first, so every family is an unbiased partial
    view of the same topic composition; adding families to a model's view
    adds evidence without changing what earlier families contained.
    """
    order = rng.permutation(len(tokens))
    shuffled = [tokens[i] for i in order]
    names = list(FIELD_SHARES)
    counts = largest_remainder([FIELD_SHARES[n] for n in names], len(shuffled))
    out: dict[str, list[str]] = {}
    at = 0
    for name, count in zip(names, counts):
        out[name] = shuffled[at : at + count]
        at += count
    return out


def generate_synthetic(
    seed: int,
    n_queries: int,
    n_pins: int,
    vocab_size: int = 4000,
    config: SyntheticConfig | None = None,
) -> SyntheticCorpus:
    """Seeded corpus with tiered ground truth.

    Every query owns one latent topic; every pin a composition over topics.
    The true relevance level of (query, pin) is a deterministic tier of the
    pin's mass on the query's topic, and pin text allocates tokens across
    field families proportionally to that composition, so the level is
    recoverable from text. Rater annotations add seeded +/-1 flips around
    the truth; the engagement log is biased toward relevant pairs.
    """
    if config is None:
        config = SyntheticConfig(
            n_queries=n_queries, n_pins=n_pins, seed=seed, vocab_size=vocab_size
        )
    else:
        config = replace(
            config, n_queries=n_queries, n_pins=n_pins, seed=seed, vocab_size=vocab_size
        )
    rng = np.random.default_rng(config.seed)
    pools, background = _topic_pools(config)
    n_topics = config.n_topics

    queries: list[QueryRecord] = []
    query_topic: dict[str, int] = {}
    for i in range(config.n_queries):
        topic = i % n_topics
        words = rng.choice(len(pools[topic]), size=config.query_tokens, replace=False)
        query_id = f"q{i:06d}"
        embedding = None
        if rng.random() >= config.missing_query_emb:
            vec = np.zeros(config.d_query_emb)
            vec[topic] = 1.0
            vec += rng.normal(0.0, 0.05, size=config.d_query_emb)
            embedding = [float(x) for x in vec]
        queries.append(
            QueryRecord(
                query_id=query_id,
                text=" ".join(pools[topic][w] for w in words),
                query_embedding=embedding,
            )
        )
        query_topic[query_id] = topic

    # Pins cycle through (topic, tier) cells so every cell is populated;
    # tier priors then control the annotated pair mix, not the pin mix.
    pins: list[PinDocument] = []
    pin_composition: dict[str, tuple[float, ...]] = {}
    cells: dict[tuple[int, int], list[str]] = {
        (t, g): [] for t in range(n_topics) for g in range(1, NUM_LEVELS + 1)
    }
    source_values = ("web", "app", "upload")
    for i in range(config.n_pins):
        topic = (i // NUM_LEVELS) % n_topics
        tier = i % NUM_LEVELS + 1
        pin_id = f"p{i:06d}"
        affinity = _pin_affinity(rng, topic, tier, config)

        n_tokens = int(rng.integers(config.pin_tokens - 4, config.pin_tokens + 5))
        counts = largest_remainder(affinity, n_tokens)
        tokens: list[str] = []
        for t in range(n_topics):
            if counts[t]:
                picks = rng.integers(0, len(pools[t]), size=counts[t])
                tokens.extend(pools[t][j] for j in picks)
        if counts[-1]:
            picks = rng.integers(0, len(background), size=counts[-1])
            tokens.extend(background[j] for j in picks)

        fields = _allocate_fields(rng, tokens)
        title = " ".join(fields["title"])
        description = " ".join(fields["description"])
        link_title = " ".join(fields["link_title"])
        link_description = " ".join(fields["link_description"])
        # A slice of pins exercises the title/description imputation path:
        # the field's evidence moves into the link text it is imputed from.
        if rng.random() < config.moved_title:
            link_title = " ".join(fields["link_title"] + fields["title"])
            title = ""
        if rng.random() < config.moved_description:
            link_description = " ".join(fields["link_description"] + fields["description"])
            description = ""

        embedding = None
        if rng.random() >= config.missing_pin_emb:
            vec = np.zeros(config.d_pin_emb)
            vec[:n_topics] = affinity[:n_topics]
            vec += rng.normal(0.0, 0.05, size=config.d_pin_emb)
            embedding = [float(x) for x in vec]

        board_tokens = fields["board_titles"]
        half = (len(board_tokens) + 1) // 2
        board_titles = [
            " ".join(chunk)
            for chunk in (board_tokens[:half], board_tokens[half:])
            if chunk
        ]
        pins.append(
            PinDocument(
                pin_id=pin_id,
                title=title,
                description=description,
                link_title=link_title,
                link_description=link_description,
                synthetic_caption=" ".join(fields["synthetic_caption"]),
                board_titles=board_titles,
                engaged_query_tokens=list(dict.fromkeys(fields["engaged_query_tokens"])),
                pin_embedding=embedding,
                categorical_attrs={
                    "primary_topic": f"t{topic}",
                    "source": source_values[int(rng.integers(0, len(source_values)))],
                },
            )
        )
        pin_composition[pin_id] = tuple(float(a) for a in affinity[:n_topics])
        cells[(topic, tier)].append(pin_id)

    for cell, members in cells.items():
        if not members:
            raise PipelineError(f"no pins generated for topic/tier cell {cell}")

    tiers = np.arange(1, NUM_LEVELS + 1)
    annotations: list[RaterAnnotation] = []
    for query in queries:
        topic = query_topic[query.query_id]
        drawn_tiers = rng.choice(tiers, size=config.ann_per_query, p=config.tier_priors)
        for tier in drawn_tiers:
            members = cells[(topic, int(tier))]
            pin_id = members[int(rng.integers(0, len(members)))]
            truth = tier_of(pin_composition[pin_id][topic])
            ratings = []
            for _ in range(config.n_raters):
                level = truth
                if rng.random() < config.rater_flip:
                    level = truth + (1 if rng.random() < 0.5 else -1)
                    level = min(NUM_LEVELS, max(1, level))
                ratings.append(int(level))
            annotations.append(
                RaterAnnotation(query_id=query.query_id, pin_id=pin_id, ratings=ratings)
            )

    engagement: list[EngagementRecord] = []
    for query in queries:
        topic = query_topic[query.query_id]
        drawn_tiers = rng.choice(
            tiers, size=config.engagement_per_query, p=config.engagement_tier_priors
        )
        seen: set[str] = set()
        for tier in drawn_tiers:
            members = cells[(topic, int(tier))]
            pin_id = members[int(rng.integers(0, len(members)))]
            if pin_id in seen:
                continue
            seen.add(pin_id)
            impressions = int(rng.integers(20, 200))
            truth = tier_of(pin_composition[pin_id][topic])
            rate = 0.01 + 0.08 * (truth - 1) / (NUM_LEVELS - 1)
            engaged = int(rng.binomial(impressions, rate))
            repins = int(rng.binomial(engaged, 0.5)) if engaged else 0
            engagement.append(
                EngagementRecord(
                    query_id=query.query_id,
                    pin_id=pin_id,
                    repins=repins,
                    long_clicks=engaged - repins,
                    impressions=impressions,
                )
            )

    return SyntheticCorpus(
        pins=pins,
        queries=queries,
        annotations=annotations,
        engagement=engagement,
        query_topic=query_topic,
        pin_composition=pin_composition,
        config=config,
    )


def write_synthetic(corpus: SyntheticCorpus, outdir) -> dict[str, str]:
    """Write the generated stores plus the truth sidecar; returns the paths."""
    from . import corpus as corpus_io

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "pins": str(out / "pins.jsonl"),
        "queries": str(out / "queries.jsonl"),
        "annotations": str(out / "annotations.jsonl"),
        "engagement": str(out / "engagement.jsonl"),
        "truth": str(out / "truth.jsonl"),
    }
    # Pins are stored with engagement rates folded in, so every downstream
    # consumer (training, evaluation, serving) sees one identical store.
    enriched = corpus_io.apply_engagement_rates(corpus.pins, corpus.engagement)
    corpus_io.save_pins(enriched, paths["pins"])
    corpus_io.save_queries(corpus.queries, paths["queries"])
    corpus_io.save_annotations(corpus.annotations, paths["annotations"])
    corpus_io.save_engagement_log(corpus.engagement, paths["engagement"])
    pairs = {(a.query_id, a.pin_id) for a in corpus.annotations}
    pairs.update((r.query_id, r.pin_id) for r in corpus.engagement)
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        for query_id, pin_id in sorted(pairs):
            fh.write(
                json.dumps(
                    {
                        "query_id": query_id,
                        "pin_id": pin_id,
                        "level": corpus.truth_level(query_id, pin_id),
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return paths


def load_truth(path) -> dict[tuple[str, str], int]:
    truth: dict[tuple[str, str], int] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            truth[(obj["query_id"], obj["pin_id"])] = int(obj["level"])
    return truth


# ---------------------------------------------------------------------------
# Teacher orchestration helpers


def split_pairs_by_query(
    pairs: Sequence, test_fraction: float, seed: int
) -> tuple[list, list]:
    """Query-level partition of anything carrying a query_id attribute."""
    train, test = [], []
    for item in pairs:
        (test if split_unit(item.query_id, seed) < test_fraction else train).append(item)
    return train, test


def oracle_examples(
    corpus: SyntheticCorpus, items: Sequence
) -> list[LabeledExample]:
    """Re-label (query_id, pin_id) carriers with one-hot generator truth."""
    return [
        LabeledExample(
            item.query_id,
            item.pin_id,
            SoftLabel.one_hot(corpus.truth_level(item.query_id, item.pin_id)),
            source="human",
        )
        for item in items
    ]


@dataclass
class TeacherRun:
    model: CrossEncoderModel
    vocab: Vocabulary
    text_config: TextRepConfig
    history: list[dict]
    report: EvalReport


def train_teacher_on_corpus(
    corpus: SyntheticCorpus,
    text_config: TextRepConfig | None = None,
    train_config: TeacherTrainConfig | None = None,
    test_fraction: float = 0.1,
    valid_fraction: float = 0.05,
    split_seed: int = 101,
    vocab: Vocabulary | None = None,
) -> TeacherRun:
    """Split by query, train on noisy human labels, evaluate vs the oracle.

    The held-out report measures accuracy against generator truth, so rater
    noise in the training labels does not cap the measured number.
    """
    text_config = text_config or TextRepConfig()
    train_config = train_config or TeacherTrainConfig()
    queries_by_id = corpus.queries_by_id()
    pins_by_id = corpus.pins_by_id()
    if vocab is None:
        vocab = build_vocabulary(corpus.pins, corpus.queries)

    annotations_train, annotations_test = split_pairs_by_query(
        corpus.annotations, test_fraction, split_seed
    )
    annotations_fit, annotations_valid = split_pairs_by_query(
        annotations_train, valid_fraction, split_seed + 1
    )
    fit_examples = [
        LabeledExample(a.query_id, a.pin_id, aggregate_soft_label(a), source="human")
        for a in annotations_fit
    ]
    valid_examples = oracle_examples(corpus, annotations_valid)
    test_examples = oracle_examples(corpus, annotations_test)

    fit_set = build_teacher_dataset(fit_examples, queries_by_id, pins_by_id, vocab, text_config)
    valid_set = build_teacher_dataset(
        valid_examples, queries_by_id, pins_by_id, vocab, text_config
    )
    test_set = build_teacher_dataset(
        test_examples, queries_by_id, pins_by_id, vocab, text_config
    )

    model, history = train_teacher(fit_set, valid_set, train_config, vocab_size=vocab.size)
    report = eval_teacher(model, test_set)
    return TeacherRun(
        model=model, vocab=vocab, text_config=text_config, history=history, report=report
    )


# ---------------------------------------------------------------------------
# Text-feature ablation

ABLATION_STEPS: tuple[tuple[str, ...], ...] = (
    FIELD_ORDER[:1],  # caption only
    FIELD_ORDER[:3],  # + title, description
    FIELD_ORDER[:5],  # + link title, link description
    FIELD_ORDER[:6],  # + board titles
    FIELD_ORDER[:7],  # + engaged query tokens
)


def run_text_ablation(
    corpus: SyntheticCorpus,
    text_config: TextRepConfig | None = None,
    train_config: TeacherTrainConfig | None = None,
    test_fraction: float = 0.1,
    split_seed: int = 101,
) -> list[dict]:
    """Teacher accuracy as field families are added one group at a time.

    The vocabulary is built once over the full corpus; each step restricts
    only which families the encoder input assembles, mirroring sequential
    feature addition. Returns one row per step with the field list and the
    held-out oracle accuracy.
    """
    base = text_config or TextRepConfig()
    vocab = build_vocabulary(corpus.pins, corpus.queries)
    rows = []
    for step in ABLATION_STEPS:
        step_config = replace(base, field_order=step)
        run = train_teacher_on_corpus(
            corpus,
            text_config=step_config,
            train_config=train_config,
            test_fraction=test_fraction,
            split_seed=split_seed,
            vocab=vocab,
        )
        rows.append(
            {
                "fields": list(step),
                "accuracy": run.report.accuracy,
                "n_examples": run.report.n_examples,
            }
        )
        logger.info("ablation %s: accuracy %.4f", step, rows[-1]["accuracy"])
    return rows
