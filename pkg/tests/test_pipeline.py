import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relsearch import corpus as corpus_io
from relsearch import pipeline as pl
from relsearch.corpus import (
    EngagementRecord,
    LabeledExample,
    PinDocument,
    QueryRecord,
    SoftLabel,
    aggregate_soft_label,
)
from relsearch.features import FeatureExtractor, build_bm25_index, build_feature_layout
from relsearch.student import StudentConfig, StudentTrainConfig
from relsearch.teacher import TeacherConfig, TeacherTrainConfig

# chi-square critical value, 4 degrees of freedom, alpha 0.001
CHI2_CRIT_DF4 = 18.4668


class FixedScorer:
    """Deterministic stand-in teacher: level = len(pin_id) mod 5 + 1."""

    def score(self, query_text, pin):
        return SoftLabel.one_hot(len(pin.pin_id) % 5 + 1)


class BatchScorer(FixedScorer):
    def __init__(self):
        self.batch_calls = 0

    def score_many(self, query_texts, pins):
        self.batch_calls += 1
        return [self.score(q, p) for q, p in zip(query_texts, pins)]


def tiny_world():
    queries = {f"q{i}": QueryRecord(query_id=f"q{i}", text=f"query {i}") for i in range(3)}
    pins = {f"p{i}": PinDocument(pin_id=f"p{i}", title=f"pin {i}") for i in range(4)}
    return queries, pins


class TestLabelPool:
    def test_labels_in_order_with_teacher_source(self):
        queries, pins = tiny_world()
        pairs = [
            pl.UnlabeledPair("q0", "p0"),
            pl.UnlabeledPair("q1", "p1"),
            pl.UnlabeledPair("q2", "p3"),
        ]
        examples, skips = pl.label_pool(FixedScorer(), pairs, queries, pins)
        assert [(e.query_id, e.pin_id) for e in examples] == [
            ("q0", "p0"),
            ("q1", "p1"),
            ("q2", "p3"),
        ]
        assert all(e.source == "teacher" for e in examples)
        assert skips == {"missing_query": 0, "missing_pin": 0}

    def test_skips_counted(self):
        queries, pins = tiny_world()
        pairs = [
            pl.UnlabeledPair("q0", "p0"),
            pl.UnlabeledPair("q?", "p0"),
            pl.UnlabeledPair("q1", "p?"),
            pl.UnlabeledPair("q?", "p?"),  # query checked first
        ]
        examples, skips = pl.label_pool(FixedScorer(), pairs, queries, pins)
        assert len(examples) == 1
        assert skips == {"missing_query": 2, "missing_pin": 1}
        assert len(examples) + sum(skips.values()) == len(pairs)

    def test_batch_scorer_used(self):
        queries, pins = tiny_world()
        scorer = BatchScorer()
        pairs = [pl.UnlabeledPair("q0", "p0"), pl.UnlabeledPair("q1", "p1")]
        examples, _ = pl.label_pool(scorer, pairs, queries, pins)
        assert scorer.batch_calls == 1
        singles, _ = pl.label_pool(FixedScorer(), pairs, queries, pins)
        assert [e.label for e in examples] == [e.label for e in singles]

    def test_empty_pool(self):
        queries, pins = tiny_world()
        examples, skips = pl.label_pool(FixedScorer(), [], queries, pins)
        assert examples == []
        assert skips == {"missing_query": 0, "missing_pin": 0}


class TestPairsFromEngagement:
    def test_weight_floor(self):
        records = [
            EngagementRecord("q1", "p1", repins=1, long_clicks=0, impressions=50),
            EngagementRecord("q2", "p2", repins=0, long_clicks=0, impressions=0),
        ]
        pairs = pl.pairs_from_engagement(records)
        assert pairs[0] == pl.UnlabeledPair("q1", "p1", weight=50)
        assert pairs[1].weight == 1


def make_pool(counts_by_level):
    pool = []
    i = 0
    for level, count in counts_by_level.items():
        for _ in range(count):
            pool.append(
                LabeledExample(f"q{i}", f"p{i}", SoftLabel.one_hot(level), source="teacher")
            )
            i += 1
    return pool


class TestSamplingSpec:
    def test_validation(self):
        with pytest.raises(pl.PipelineError):
            pl.SamplingSpec(target_total=0)
        with pytest.raises(pl.PipelineError):
            pl.SamplingSpec(target_total=10, target_distribution=(0.5, 0.5))
        with pytest.raises(pl.PipelineError):
            pl.SamplingSpec(target_total=10, target_distribution=(0.5, 0.7, -0.2, 0.0, 0.0))
        with pytest.raises(pl.PipelineError):
            pl.SamplingSpec(target_total=10, target_distribution=(0.3, 0.3, 0.3, 0.3, 0.3))


class TestStratifiedSample:
    def test_quotas_round_half_up(self):
        pool = make_pool({1: 10, 2: 10, 3: 10, 4: 10, 5: 10})
        spec = pl.SamplingSpec(
            target_total=10, target_distribution=(0.25, 0.25, 0.25, 0.25, 0.0), seed=1
        )
        sample, report = pl.stratified_sample(pool, spec)
        # 10 * 0.25 = 2.5 rounds half up to 3 per class, never redistributed
        assert report["quota"] == {1: 3, 2: 3, 3: 3, 4: 3, 5: 0}
        assert report["taken"] == {1: 3, 2: 3, 3: 3, 4: 3, 5: 0}
        assert report["shortfall"] == {1: 0, 2: 0, 3: 0, 4: 0, 5: 0}
        assert len(sample) == 12

    def test_shortfall_not_redistributed(self):
        pool = make_pool({1: 2, 2: 50, 3: 50, 4: 50, 5: 50})
        spec = pl.SamplingSpec(target_total=100, seed=2)
        sample, report = pl.stratified_sample(pool, spec)
        assert report["quota"][1] == 20
        assert report["taken"][1] == 2
        assert report["shortfall"][1] == 18
        assert report["taken"][2] == 20  # unchanged by class 1's deficit
        assert len(sample) == 82

    def test_preserves_pool_order(self):
        pool = make_pool({1: 30, 2: 30, 3: 30, 4: 30, 5: 30})
        spec = pl.SamplingSpec(target_total=50, seed=3)
        sample, _ = pl.stratified_sample(pool, spec)
        positions = [pool.index(ex) for ex in sample]
        assert positions == sorted(positions)

    def test_deterministic_per_seed(self):
        pool = make_pool({1: 30, 2: 30, 3: 30, 4: 30, 5: 30})
        a, _ = pl.stratified_sample(pool, pl.SamplingSpec(target_total=50, seed=4))
        b, _ = pl.stratified_sample(pool, pl.SamplingSpec(target_total=50, seed=4))
        c, _ = pl.stratified_sample(pool, pl.SamplingSpec(target_total=50, seed=5))
        assert a == b
        assert a != c

    def test_argmax_tie_strata(self):
        flat = SoftLabel(probs=(0.3, 0.3, 0.2, 0.1, 0.1))  # argmax tie -> level 1
        pool = [LabeledExample("q", "p", flat, source="teacher")]
        spec = pl.SamplingSpec(
            target_total=1, target_distribution=(1.0, 0.0, 0.0, 0.0, 0.0), seed=0
        )
        sample, report = pl.stratified_sample(pool, spec)
        assert len(sample) == 1
        assert report["taken"][1] == 1

    def test_empty_pool_rejected(self):
        with pytest.raises(pl.PipelineError, match="empty"):
            pl.stratified_sample([], pl.SamplingSpec(target_total=1))

    @given(
        counts=st.lists(st.integers(min_value=0, max_value=25), min_size=5, max_size=5),
        total=st.integers(min_value=1, max_value=80),
        seed=st.integers(min_value=0, max_value=50),
    )
    @settings(max_examples=100, deadline=None)
    def test_taken_bounded_by_quota_and_available(self, counts, total, seed):
        pool = make_pool({level: n for level, n in zip(range(1, 6), counts)})
        if not pool:
            return
        spec = pl.SamplingSpec(target_total=total, seed=seed)
        sample, report = pl.stratified_sample(pool, spec)
        for level in range(1, 6):
            assert report["taken"][level] == min(
                report["quota"][level], report["available"][level]
            )
            assert report["shortfall"][level] == (
                report["quota"][level] - report["taken"][level]
            )
        assert len(sample) == sum(report["taken"].values())
        by_level = Counter(ex.label.argmax_level() for ex in sample)
        for level in range(1, 6):
            assert by_level.get(level, 0) == report["taken"][level]


class TestLargestRemainder:
    def test_exact_split(self):
        assert pl.largest_remainder([0.5, 0.5], 4) == [2, 2]

    def test_remainder_goes_to_largest(self):
        assert pl.largest_remainder([3, 1], 5) == [4, 1]

    def test_sum_is_exact(self):
        for total in (0, 1, 7, 40):
            counts = pl.largest_remainder([0.15, 0.12, 0.25, 0.08, 0.2, 0.12, 0.08], total)
            assert sum(counts) == total
            assert all(c >= 0 for c in counts)

    def test_validation(self):
        with pytest.raises(pl.PipelineError):
            pl.largest_remainder([1.0], -1)
        with pytest.raises(pl.PipelineError):
            pl.largest_remainder([0.0, 0.0], 3)

    @given(
        weights=st.lists(
            st.floats(min_value=0.01, max_value=10, allow_nan=False), min_size=1, max_size=8
        ),
        total=st.integers(min_value=0, max_value=200),
    )
    @settings(max_examples=200)
    def test_property_sum_and_proximity(self, weights, total):
        counts = pl.largest_remainder(weights, total)
        assert sum(counts) == total
        exact = np.asarray(weights) / sum(weights) * total
        assert all(abs(c - e) < 1.0 for c, e in zip(counts, exact))


class TestExampleSetHash:
    def test_stable_and_order_sensitive(self):
        pool = make_pool({1: 2, 3: 2})
        assert pl.example_set_hash(pool) == pl.example_set_hash(list(pool))
        assert pl.example_set_hash(pool) != pl.example_set_hash(pool[::-1])
        assert len(pl.example_set_hash(pool)) == 16


class TestTierOf:
    def test_boundaries(self):
        assert pl.tier_of(0.0) == 1
        assert pl.tier_of(0.049) == 1
        assert pl.tier_of(0.05) == 2
        assert pl.tier_of(0.274) == 2
        assert pl.tier_of(0.275) == 3
        assert pl.tier_of(0.525) == 4
        assert pl.tier_of(0.775) == 5
        assert pl.tier_of(1.0) == 5


class TestGenerator:
    def test_deterministic(self):
        a = pl.generate_synthetic(seed=21, n_queries=10, n_pins=50, vocab_size=320)
        b = pl.generate_synthetic(seed=21, n_queries=10, n_pins=50, vocab_size=320)
        assert [p.title for p in a.pins] == [p.title for p in b.pins]
        assert [q.text for q in a.queries] == [q.text for q in b.queries]
        assert [r.ratings for r in a.annotations] == [r.ratings for r in b.annotations]
        assert a.pin_composition == b.pin_composition
        c = pl.generate_synthetic(seed=22, n_queries=10, n_pins=50, vocab_size=320)
        assert [p.title for p in a.pins] != [p.title for p in c.pins]

    def test_query_tokens_from_own_topic(self, tiny_corpus):
        for query in tiny_corpus.queries[:16]:
            topic = tiny_corpus.query_topic[query.query_id]
            words = query.text.split()
            assert len(set(words)) == len(words) == 3
            assert all(w.startswith(f"t{topic}w") for w in words)

    def test_composition_is_distribution(self, tiny_corpus):
        for pin_id, comp in list(tiny_corpus.pin_composition.items())[:40]:
            assert all(c >= 0.0 for c in comp)
            assert sum(comp) <= 1.0 + 1e-12

    def test_pin_text_reflects_composition(self, tiny_corpus):
        # token share per topic tracks the composition (largest-remainder
        # allocation is exact to one token; tolerance covers integer effects)
        pins_by_id = tiny_corpus.pins_by_id()
        for pin_id, comp in list(tiny_corpus.pin_composition.items())[:20]:
            pin = pins_by_id[pin_id]
            tokens = []
            for text in (
                pin.title,
                pin.description,
                pin.link_title,
                pin.link_description,
                pin.synthetic_caption,
                " ".join(pin.board_titles),
            ):
                tokens.extend(text.split())
            tokens.extend(pin.engaged_query_tokens)
            # engaged tokens are deduped on the pin, so compare loosely
            for topic, mass in enumerate(comp):
                share = sum(1 for t in tokens if t.startswith(f"t{topic}w")) / len(tokens)
                assert abs(share - mass) < 0.12

    def test_truth_level_matches_tier(self, tiny_corpus):
        for record in tiny_corpus.engagement[:30]:
            topic = tiny_corpus.query_topic[record.query_id]
            mass = tiny_corpus.pin_composition[record.pin_id][topic]
            assert tiny_corpus.truth_level(record.query_id, record.pin_id) == pl.tier_of(mass)

    def test_zero_noise_ratings_are_truth(self):
        config = pl.SyntheticConfig(rater_flip=0.0)
        corpus = pl.generate_synthetic(
            seed=31, n_queries=12, n_pins=60, vocab_size=320, config=config
        )
        for ann in corpus.annotations:
            truth = corpus.truth_level(ann.query_id, ann.pin_id)
            assert ann.ratings == [truth] * 3
            assert aggregate_soft_label(ann) == SoftLabel.one_hot(truth)

    def test_annotation_tiers_follow_priors(self, tiny_corpus):
        counts = Counter(
            tiny_corpus.truth_level(a.query_id, a.pin_id) for a in tiny_corpus.annotations
        )
        n = sum(counts.values())
        chi2 = sum(
            (counts.get(level, 0) - n * p) ** 2 / (n * p)
            for level, p in zip(range(1, 6), tiny_corpus.config.tier_priors)
        )
        assert chi2 < CHI2_CRIT_DF4

    def test_some_pins_exercise_imputation(self, tiny_corpus):
        moved = [p for p in tiny_corpus.pins if not p.title and p.link_title]
        assert moved  # the 5% moved-title slice is non-empty at 300 pins

    def test_some_embeddings_missing(self, tiny_corpus):
        assert any(q.query_embedding is None for q in tiny_corpus.queries)
        assert any(q.query_embedding is not None for q in tiny_corpus.queries)
        assert any(p.pin_embedding is None for p in tiny_corpus.pins)
        assert any(p.pin_embedding is not None for p in tiny_corpus.pins)

    def test_engagement_unique_pairs_per_query(self, tiny_corpus):
        for query_id in {r.query_id for r in tiny_corpus.engagement}:
            pins = [r.pin_id for r in tiny_corpus.engagement if r.query_id == query_id]
            assert len(pins) == len(set(pins))

    def test_engagement_biased_toward_relevant(self, tiny_corpus):
        levels = [
            tiny_corpus.truth_level(r.query_id, r.pin_id) for r in tiny_corpus.engagement
        ]
        counts = Counter(levels)
        assert counts[5] > counts[1]

    def test_config_validation(self):
        with pytest.raises(pl.PipelineError):
            pl.SyntheticConfig(n_topics=1)
        with pytest.raises(pl.PipelineError):
            pl.SyntheticConfig(tier_priors=(1.0, 0.0, 0.0, 0.0, 0.1))
        with pytest.raises(pl.PipelineError):
            pl.SyntheticConfig(rater_flip=1.5)


class TestWriteSynthetic:
    def test_round_trip(self, tiny_corpus, tmp_path):
        paths = pl.write_synthetic(tiny_corpus, tmp_path)
        pins = corpus_io.load_pins(paths["pins"])
        queries = corpus_io.load_queries(paths["queries"])
        annotations = corpus_io.load_annotations(paths["annotations"])
        engagement = corpus_io.load_engagement_log(paths["engagement"])
        assert len(pins) == len(tiny_corpus.pins)
        assert len(queries) == len(tiny_corpus.queries)
        assert len(annotations) == len(tiny_corpus.annotations)
        assert len(engagement) == len(tiny_corpus.engagement)
        # stored pins carry the folded-in engagement rates
        assert any(p.engagement_rate for p in pins)

    def test_truth_sidecar(self, tiny_corpus, tmp_path):
        paths = pl.write_synthetic(tiny_corpus, tmp_path)
        truth = pl.load_truth(paths["truth"])
        pairs = {(a.query_id, a.pin_id) for a in tiny_corpus.annotations}
        pairs.update((r.query_id, r.pin_id) for r in tiny_corpus.engagement)
        assert set(truth) == pairs
        for (query_id, pin_id), level in list(truth.items())[:50]:
            assert level == tiny_corpus.truth_level(query_id, pin_id)

    def test_truth_file_sorted(self, tiny_corpus, tmp_path):
        paths = pl.write_synthetic(tiny_corpus, tmp_path)
        with open(paths["truth"], encoding="utf-8") as fh:
            keys = [
                (obj["query_id"], obj["pin_id"])
                for obj in (json.loads(line) for line in fh if line.strip())
            ]
        assert keys == sorted(keys)


class TestSplitHelpers:
    def test_split_pairs_by_query_partition(self, tiny_corpus):
        train, test = pl.split_pairs_by_query(tiny_corpus.annotations, 0.2, seed=7)
        assert len(train) + len(test) == len(tiny_corpus.annotations)
        assert {a.query_id for a in train}.isdisjoint({a.query_id for a in test})
        assert test  # 20% of 60 queries is comfortably non-empty

    def test_oracle_examples_one_hot(self, tiny_corpus):
        examples = pl.oracle_examples(tiny_corpus, tiny_corpus.annotations[:10])
        for ex, ann in zip(examples, tiny_corpus.annotations[:10]):
            truth = tiny_corpus.truth_level(ann.query_id, ann.pin_id)
            assert ex.label == SoftLabel.one_hot(truth)
            assert ex.source == "human"


def small_teacher_config():
    return TeacherTrainConfig(
        epochs=2, batch_size=64, seed=7, model=TeacherConfig(d_model=16, hidden=32)
    )


class TestTeacherOrchestration:
    def test_train_teacher_on_corpus(self, tiny_corpus):
        run = pl.train_teacher_on_corpus(tiny_corpus, train_config=small_teacher_config())
        assert run.history
        assert run.report.n_examples > 0
        assert 0.0 <= run.report.accuracy <= 1.0
        assert run.vocab.size > 0

    def test_ablation_steps_are_prefixes(self):
        from relsearch.textrep import FIELD_ORDER

        lengths = [len(step) for step in pl.ABLATION_STEPS]
        assert lengths == [1, 3, 5, 6, 7]
        for step in pl.ABLATION_STEPS:
            assert step == FIELD_ORDER[: len(step)]

    def test_run_text_ablation_rows(self, tiny_corpus):
        rows = pl.run_text_ablation(tiny_corpus, train_config=small_teacher_config())
        assert len(rows) == len(pl.ABLATION_STEPS)
        for row, step in zip(rows, pl.ABLATION_STEPS):
            assert row["fields"] == list(step)
            assert 0.0 <= row["accuracy"] <= 1.0
            assert row["n_examples"] > 0


class TestFeaturesForExamples:
    def test_batch_and_query_ids(self, tiny_corpus, tiny_stores):
        queries_by_id, pins_by_id = tiny_stores
        examples = pl.oracle_examples(tiny_corpus, tiny_corpus.annotations[:12])
        layout = build_feature_layout(tiny_corpus.pins, d_query_emb=16, d_pin_emb=16)
        extractor = FeatureExtractor(build_bm25_index(tiny_corpus.pins), layout)
        batch, query_ids = pl.features_for_examples(
            extractor, examples, queries_by_id, pins_by_id
        )
        assert len(batch) == 12
        assert query_ids == [ex.query_id for ex in examples]
        assert batch.targets.shape == (12, 5)

    def test_unknown_ids_rejected(self, tiny_corpus, tiny_stores):
        queries_by_id, pins_by_id = tiny_stores
        layout = build_feature_layout(tiny_corpus.pins, d_query_emb=16, d_pin_emb=16)
        extractor = FeatureExtractor(build_bm25_index(tiny_corpus.pins), layout)
        bad = [LabeledExample("q?", "p?", SoftLabel.one_hot(1), source="human")]
        with pytest.raises(pl.PipelineError, match="query_id"):
            pl.features_for_examples(extractor, bad, queries_by_id, pins_by_id)


class TestScalingExperiment:
    def _setup(self, tiny_corpus):
        pairs = pl.pairs_from_engagement(tiny_corpus.engagement)
        pool = pl.oracle_examples(tiny_corpus, pairs)
        test_examples = pl.oracle_examples(tiny_corpus, tiny_corpus.annotations[:60])
        enriched = corpus_io.apply_engagement_rates(tiny_corpus.pins, tiny_corpus.engagement)
        layout = build_feature_layout(enriched, d_query_emb=16, d_pin_emb=16)
        extractor = FeatureExtractor(build_bm25_index(enriched), layout)
        pins_by_id = {p.pin_id: p for p in enriched}
        return pool, test_examples, extractor, tiny_corpus.queries_by_id(), pins_by_id

    def test_rows_share_test_hash(self, tiny_corpus):
        pool, test_examples, extractor, queries_by_id, pins_by_id = self._setup(tiny_corpus)
        config = StudentTrainConfig(
            epochs=2, batch_size=64, seed=5, model=StudentConfig(16, 8)
        )
        rows = pl.run_scaling_experiment(
            pool,
            [50, 100],
            test_examples,
            extractor,
            queries_by_id,
            pins_by_id,
            config,
            sampling_seed=1,
        )
        assert [row["size"] for row in rows] == [50, 100]
        assert rows[0]["test_set_hash"] == rows[1]["test_set_hash"]
        assert rows[0]["test_set_hash"] == pl.example_set_hash(test_examples)
        for row in rows:
            assert 0.0 <= row["accuracy"] <= 1.0
            assert set(row) == {
                "size",
                "accuracy",
                "auroc_3plus",
                "auroc_4plus",
                "auroc_5plus",
                "test_set_hash",
            }

    def test_unsorted_sizes_rejected(self, tiny_corpus):
        pool, test_examples, extractor, queries_by_id, pins_by_id = self._setup(tiny_corpus)
        with pytest.raises(pl.PipelineError, match="ascending"):
            pl.run_scaling_experiment(
                pool,
                [100, 50],
                test_examples,
                extractor,
                queries_by_id,
                pins_by_id,
                StudentTrainConfig(epochs=1, model=StudentConfig(8, 8)),
            )

    def test_unfillable_size_rejected(self, tiny_corpus):
        pool, test_examples, extractor, queries_by_id, pins_by_id = self._setup(tiny_corpus)
        with pytest.raises(pl.PipelineError, match="cannot fill"):
            pl.run_scaling_experiment(
                pool,
                [10 * len(pool)],
                test_examples,
                extractor,
                queries_by_id,
                pins_by_id,
                StudentTrainConfig(epochs=1, model=StudentConfig(8, 8)),
            )
