"""Distillation scaling experiment: student accuracy vs distilled-set size.

Generates a seeded synthetic corpus, trains the cross-encoder teacher on its
rater annotations, pseudo-labels the engagement pool, then trains one student
per stratified sample size and evaluates every student on the same held-out
generator-truth examples. A student trained on a small generator-truth set is
reported alongside as the human-label baseline.

    python3 scripts/run_scaling.py --sizes 10000,50000,150000 --out rows.jsonl
"""

import argparse
import json
import logging
import time

from relsearch import pipeline as pl
from relsearch.corpus import apply_engagement_rates
from relsearch.features import FeatureExtractor, build_bm25_index, build_feature_layout
from relsearch.student import StudentTrainConfig, eval_student, train_student
from relsearch.teacher import CrossEncoderScorer, TeacherTrainConfig


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=5)
    parser.add_argument("--n-queries", type=int, default=10_000)
    parser.add_argument("--n-pins", type=int, default=50_000)
    parser.add_argument("--vocab-size", type=int, default=4_000)
    parser.add_argument("--sizes", default="10000,50000,150000")
    parser.add_argument("--human-baseline", type=int, default=5_000)
    parser.add_argument("--out", default=None, help="optional JSONL output path")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    sizes = [int(s) for s in args.sizes.split(",") if s]

    t0 = time.perf_counter()
    corpus = pl.generate_synthetic(
        seed=args.seed,
        n_queries=args.n_queries,
        n_pins=args.n_pins,
        vocab_size=args.vocab_size,
    )
    run = pl.train_teacher_on_corpus(
        corpus, train_config=TeacherTrainConfig(epochs=12, batch_size=256, seed=7)
    )
    print(f"teacher holdout accuracy: {run.report.accuracy:.4f}")

    pins = apply_engagement_rates(corpus.pins, corpus.engagement)
    pins_by_id = {p.pin_id: p for p in pins}
    queries_by_id = corpus.queries_by_id()

    pairs = pl.pairs_from_engagement(corpus.engagement)
    train_pairs, _ = pl.split_pairs_by_query(pairs, 0.1, 101)
    scorer = CrossEncoderScorer(run.model, run.vocab, run.text_config)
    pool, skips = pl.label_pool(scorer, train_pairs, queries_by_id, pins_by_id)
    print(f"labeled pool: {len(pool)} examples, skips {skips}")

    _, test_annotations = pl.split_pairs_by_query(corpus.annotations, 0.1, 101)
    test_examples = pl.oracle_examples(corpus, test_annotations)

    index = build_bm25_index(pins)
    layout = build_feature_layout(pins, 16, 16)
    extractor = FeatureExtractor(index, layout)
    train_config = StudentTrainConfig(epochs=15, batch_size=512, seed=11)
    rows = pl.run_scaling_experiment(
        pool, sizes, test_examples, extractor, queries_by_id, pins_by_id,
        train_config, sampling_seed=3,
    )
    for row in rows:
        print(json.dumps(row, sort_keys=True))

    train_annotations, _ = pl.split_pairs_by_query(corpus.annotations, 0.1, 101)
    human_pool = pl.oracle_examples(corpus, train_annotations)[: args.human_baseline]
    n_valid = max(1, len(human_pool) // 20)
    train_batch, _ = pl.features_for_examples(
        extractor, human_pool[n_valid:], queries_by_id, pins_by_id
    )
    valid_batch, _ = pl.features_for_examples(
        extractor, human_pool[:n_valid], queries_by_id, pins_by_id
    )
    model, _ = train_student(train_batch, valid_batch, train_config, layout)
    test_batch, test_qids = pl.features_for_examples(
        extractor, test_examples, queries_by_id, pins_by_id
    )
    baseline = eval_student(model, test_batch, query_ids=test_qids)
    print(
        f"human-{len(human_pool)} baseline accuracy: {baseline.accuracy:.4f} "
        f"(gap vs largest distilled set: {rows[-1]['accuracy'] - baseline.accuracy:+.4f})"
    )
    print(f"total {time.perf_counter() - t0:.1f}s")

    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        print(f"rows -> {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
