"""Command-line pipeline driver.

Subcommands cover the whole flow: ingest (or synth-gen) -> build-index ->
train-teacher -> distill-label -> sample -> train-student -> eval, plus
scale-report and serve. Every step is seeded and writes deterministic
artifacts, so a pipeline rerun with the same seed reproduces outputs byte
for byte.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import corpus as corpus_io
from .config import AppConfig, apply_flags, load_config
from .corpus import (
    LabeledExample,
    SoftLabel,
    aggregate_soft_label,
    human_examples,
    split_unit,
)
from .features import FeatureExtractor, build_bm25_index, build_feature_layout, load_bm25_index, save_bm25_index
from .pipeline import (
    SamplingSpec,
    features_for_examples,
    label_pool,
    load_truth,
    pairs_from_engagement,
    run_scaling_experiment,
    stratified_sample,
    generate_synthetic,
    write_synthetic,
)
from .service import ServiceConfig, serve
from .student import (
    StudentConfig,
    StudentTrainConfig,
    eval_student,
    load_student,
    save_student,
    train_student,
)
from .teacher import (
    CrossEncoderScorer,
    TeacherConfig,
    TeacherTrainConfig,
    build_teacher_dataset,
    eval_teacher,
    load_teacher,
    save_teacher,
    train_teacher,
)
from .textrep import TextRepConfig, build_vocabulary, load_vocabulary, save_vocabulary


def _require(path: str, hint: str) -> str:
    if not Path(path).exists():
        raise FileNotFoundError(f"{path} not found ({hint})")
    return path


def _text_config(config: AppConfig) -> TextRepConfig:
    return TextRepConfig(max_len=config.max_len)


def _split_test(items, test_fraction: float, seed: int):
    """Query-level split shared by train-teacher, distill-label and eval."""
    train, test = [], []
    for item in items:
        (test if split_unit(item.query_id, seed) < test_fraction else train).append(item)
    return train, test


def _load_stores(config: AppConfig):
    pins = corpus_io.load_pins(_require(config.path("pins"), "run ingest or synth-gen"))
    queries = corpus_io.load_queries(
        _require(config.path("queries"), "run ingest or synth-gen")
    )
    return pins, queries


def _extractor(config: AppConfig, pins, layout=None) -> FeatureExtractor:
    index = load_bm25_index(_require(config.path("bm25_index"), "run build-index"))
    if layout is None:
        layout = build_feature_layout(pins, config.d_query_emb, config.d_pin_emb)
    return FeatureExtractor(index, layout)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth_gen(args, config: AppConfig) -> int:
    corpus = generate_synthetic(
        config.seed, config.n_queries, config.n_pins, config.vocab_size
    )
    paths = write_synthetic(corpus, config.workdir)
    print(
        f"generated {len(corpus.queries)} queries, {len(corpus.pins)} pins, "
        f"{len(corpus.annotations)} annotations, {len(corpus.engagement)} engagement rows"
    )
    for name in sorted(paths):
        print(f"  {name}: {paths[name]}")
    return 0


def cmd_ingest(args, config: AppConfig) -> int:
    Path(config.workdir).mkdir(parents=True, exist_ok=True)
    pins = corpus_io.load_pins(args.pins)
    queries = corpus_io.load_queries(args.queries)
    annotations = corpus_io.load_annotations(args.annotations) if args.annotations else []
    engagement = (
        corpus_io.load_engagement_log(args.engagement) if args.engagement else []
    )
    if engagement:
        pins = corpus_io.apply_engagement_rates(pins, engagement)
    corpus_io.save_pins(pins, config.path("pins"))
    corpus_io.save_queries(queries, config.path("queries"))
    if annotations:
        corpus_io.save_annotations(annotations, config.path("annotations"))
    if engagement:
        corpus_io.save_engagement_log(engagement, config.path("engagement"))
    print(
        f"ingested {len(pins)} pins, {len(queries)} queries, "
        f"{len(annotations)} annotations, {len(engagement)} engagement rows"
    )
    return 0


def cmd_build_index(args, config: AppConfig) -> int:
    pins, queries = _load_stores(config)
    vocab = build_vocabulary(pins, queries)
    save_vocabulary(vocab, config.path("vocab"))
    index = build_bm25_index(pins)
    save_bm25_index(index, config.path("bm25_index"))
    print(f"vocabulary: {vocab.size} tokens -> {config.path('vocab')}")
    print(f"bm25 index: {index.n_docs} documents -> {config.path('bm25_index')}")
    return 0


def _truth_labels(config: AppConfig):
    truth_path = Path(config.path("truth"))
    return load_truth(truth_path) if truth_path.exists() else None


def _test_examples(config: AppConfig, annotations, truth) -> list[LabeledExample]:
    """Held-out examples: oracle one-hots when truth is available, else
    aggregated rater labels."""
    _, test_annotations = _split_test(annotations, config.test_fraction, config.seed)
    out = []
    for a in test_annotations:
        if truth is not None:
            label = SoftLabel.one_hot(truth[(a.query_id, a.pin_id)])
        else:
            label = aggregate_soft_label(a)
        out.append(LabeledExample(a.query_id, a.pin_id, label, source="human"))
    return out


def cmd_train_teacher(args, config: AppConfig) -> int:
    pins, queries = _load_stores(config)
    annotations = corpus_io.load_annotations(
        _require(config.path("annotations"), "run ingest or synth-gen")
    )
    vocab = load_vocabulary(_require(config.path("vocab"), "run build-index"))
    text_config = _text_config(config)
    queries_by_id = {q.query_id: q for q in queries}
    pins_by_id = {p.pin_id: p for p in pins}

    truth = _truth_labels(config)
    train_annotations, _ = _split_test(annotations, config.test_fraction, config.seed)
    fit_annotations, valid_annotations = _split_test(train_annotations, 0.05, config.seed + 1)

    fit_set = build_teacher_dataset(
        human_examples(fit_annotations), queries_by_id, pins_by_id, vocab, text_config
    )
    valid_set = build_teacher_dataset(
        human_examples(valid_annotations), queries_by_id, pins_by_id, vocab, text_config
    )
    train_config = TeacherTrainConfig(
        epochs=config.teacher_epochs,
        batch_size=config.teacher_batch,
        seed=config.seed,
        max_len=config.max_len,
        lr=config.teacher_lr,
        model=TeacherConfig(d_model=config.d_model, hidden=config.teacher_hidden),
    )
    model, history = train_teacher(fit_set, valid_set, train_config, vocab_size=vocab.size)

    test_examples = _test_examples(config, annotations, truth)
    test_set = build_teacher_dataset(
        test_examples, queries_by_id, pins_by_id, vocab, text_config
    )
    report = eval_teacher(model, test_set)
    save_teacher(model, config.path("teacher"), vocab_hash=vocab.content_hash(), history=history)
    print(report.text_table())
    print(f"teacher -> {config.path('teacher')}")
    return 0


def cmd_distill_label(args, config: AppConfig) -> int:
    pins, queries = _load_stores(config)
    engagement = corpus_io.load_engagement_log(
        _require(config.path("engagement"), "run ingest or synth-gen")
    )
    vocab = load_vocabulary(_require(config.path("vocab"), "run build-index"))
    model = load_teacher(_require(config.path("teacher"), "run train-teacher"))
    scorer = CrossEncoderScorer(model, vocab, _text_config(config))

    pairs = pairs_from_engagement(engagement)
    # Hold out the evaluation queries so distilled training never sees them.
    pairs = [
        p for p in pairs if split_unit(p.query_id, config.seed) >= config.test_fraction
    ]
    examples, skips = label_pool(
        scorer, pairs, {q.query_id: q for q in queries}, {p.pin_id: p for p in pins}
    )
    corpus_io.save_examples(examples, config.path("labeled_pool"))
    print(
        f"labeled {len(examples)} pairs "
        f"(skipped: {skips['missing_query']} missing queries, "
        f"{skips['missing_pin']} missing pins) -> {config.path('labeled_pool')}"
    )
    return 0


def cmd_sample(args, config: AppConfig) -> int:
    pool = corpus_io.load_examples(
        _require(config.path("labeled_pool"), "run distill-label")
    )
    spec = SamplingSpec(target_total=config.sample_total, seed=config.seed)
    sample, report = stratified_sample(pool, spec)
    corpus_io.save_examples(sample, config.path("sampled_pool"))
    print(f"sampled {len(sample)} of {len(pool)} -> {config.path('sampled_pool')}")
    for level in sorted(report["quota"]):
        print(
            f"  L{level}: quota {report['quota'][level]}, "
            f"taken {report['taken'][level]}, shortfall {report['shortfall'][level]}"
        )
    return 0


def cmd_train_student(args, config: AppConfig) -> int:
    pins, queries = _load_stores(config)
    pool = corpus_io.load_examples(
        _require(config.path("sampled_pool"), "run sample")
    )
    extractor = _extractor(config, pins)
    queries_by_id = {q.query_id: q for q in queries}
    pins_by_id = {p.pin_id: p for p in pins}

    fit_pool, valid_pool = _split_test(pool, 0.05, config.seed + 1)
    train_batch, _ = features_for_examples(extractor, fit_pool, queries_by_id, pins_by_id)
    valid_batch, _ = features_for_examples(extractor, valid_pool, queries_by_id, pins_by_id)
    train_config = StudentTrainConfig(
        epochs=config.student_epochs,
        batch_size=config.student_batch,
        seed=config.seed,
        lr=config.student_lr,
        model=StudentConfig(hidden1=config.student_hidden1, hidden2=config.student_hidden2),
    )
    model, history = train_student(train_batch, valid_batch, train_config, extractor.layout)
    save_student(model, config.path("student"))
    last = history[-1]
    print(f"trained student on {len(train_batch)} examples ({len(history)} epochs)")
    if "valid_accuracy" in last:
        print(f"final validation accuracy: {last['valid_accuracy']:.4f}")
    print(f"student -> {config.path('student')}")
    return 0


def cmd_eval(args, config: AppConfig) -> int:
    pins, queries = _load_stores(config)
    annotations = corpus_io.load_annotations(
        _require(config.path("annotations"), "run ingest or synth-gen")
    )
    model = load_student(_require(args.student or config.path("student"), "run train-student"))
    extractor = _extractor(config, pins, layout=model.layout)

    truth = _truth_labels(config)
    test_examples = _test_examples(config, annotations, truth)
    if not test_examples:
        raise ValueError("no held-out examples; check test_fraction")
    batch, query_ids = features_for_examples(
        extractor, test_examples, {q.query_id: q for q in queries}, {p.pin_id: p for p in pins}
    )
    report = eval_student(model, batch, query_ids=query_ids)
    report.save(config.path("report"))
    print(report.text_table())
    print(f"report -> {config.path('report')}")
    return 0


def cmd_scale_report(args, config: AppConfig) -> int:
    pins, queries = _load_stores(config)
    annotations = corpus_io.load_annotations(
        _require(config.path("annotations"), "run ingest or synth-gen")
    )
    pool = corpus_io.load_examples(
        _require(config.path("labeled_pool"), "run distill-label")
    )
    sizes = [int(s) for s in args.sizes.split(",") if s]
    if not sizes:
        raise ValueError("--sizes must name at least one size")
    extractor = _extractor(config, pins)
    truth = _truth_labels(config)
    test_examples = _test_examples(config, annotations, truth)
    train_config = StudentTrainConfig(
        epochs=config.student_epochs,
        batch_size=config.student_batch,
        seed=config.seed,
        lr=config.student_lr,
        model=StudentConfig(hidden1=config.student_hidden1, hidden2=config.student_hidden2),
    )
    rows = run_scaling_experiment(
        pool,
        sizes,
        test_examples,
        extractor,
        {q.query_id: q for q in queries},
        {p.pin_id: p for p in pins},
        train_config,
        sampling_seed=config.seed,
    )
    with open(config.path("scaling_report"), "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"{'size':>10}  {'accuracy':>8}  {'auroc3+':>8}  {'auroc4+':>8}  {'auroc5+':>8}")
    for row in rows:
        print(
            f"{row['size']:>10}  {row['accuracy']:>8.4f}  "
            f"{(row['auroc_3plus'] or 0.0):>8.4f}  {(row['auroc_4plus'] or 0.0):>8.4f}  "
            f"{(row['auroc_5plus'] or 0.0):>8.4f}"
        )
    print(f"scaling report -> {config.path('scaling_report')}")
    return 0


def cmd_serve(args, config: AppConfig) -> int:
    query_embeddings = config.path("query_embeddings")
    service_config = ServiceConfig(
        student_checkpoint=_require(
            args.student or config.path("student"), "run train-student"
        ),
        bm25_index=_require(config.path("bm25_index"), "run build-index"),
        pin_store=_require(config.path("pins"), "run ingest or synth-gen"),
        query_embedding_store=query_embeddings if Path(query_embeddings).exists() else None,
        host=config.host,
        port=config.port,
        max_batch=config.max_batch,
    )
    serve(service_config)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a JSON config file")
    common.add_argument("--workdir", help="artifact directory")
    common.add_argument("--seed", type=int, help="global random seed")

    parser = argparse.ArgumentParser(
        prog="relsearch", description="search relevance training and serving pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--n-queries", type=int, dest="n_queries")
    p.add_argument("--n-pins", type=int, dest="n_pins")
    p.add_argument("--vocab-size", type=int, dest="vocab_size")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("ingest", parents=[common], help="validate and import stores")
    p.add_argument("--pins", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--annotations")
    p.add_argument("--engagement")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("build-index", parents=[common], help="build vocabulary and BM25 index")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("train-teacher", parents=[common], help="train the cross-encoder teacher")
    p.add_argument("--epochs", type=int, dest="teacher_epochs")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser(
        "distill-label", parents=[common], help="pseudo-label the engagement pool"
    )
    p.set_defaults(func=cmd_distill_label)

    p = sub.add_parser("sample", parents=[common], help="stratified-sample the labeled pool")
    p.add_argument("--total", type=int, dest="sample_total")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train-student", parents=[common], help="train the serving student")
    p.add_argument("--epochs", type=int, dest="student_epochs")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("eval", parents=[common], help="evaluate on held-out queries")
    p.add_argument("--student", help="student checkpoint (default: workdir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("scale-report", parents=[common], help="distilled-size scaling table")
    p.add_argument("--sizes", default="10000,50000,150000")
    p.set_defaults(func=cmd_scale_report)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP scoring service")
    p.add_argument("--student", help="student checkpoint (default: workdir)")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    return parser


_FLAG_FIELDS = (
    "workdir",
    "seed",
    "n_queries",
    "n_pins",
    "vocab_size",
    "teacher_epochs",
    "student_epochs",
    "sample_total",
    "host",
    "port",
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2

    try:
        config = load_config(args.config)
        overrides = {
            name: getattr(args, name) for name in _FLAG_FIELDS if hasattr(args, name)
        }
        config = apply_flags(config, **overrides)
        Path(config.workdir).mkdir(parents=True, exist_ok=True)
        return args.func(args, config)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
