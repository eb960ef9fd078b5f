"""Field-family ablation: teacher accuracy as text fields are added in order.

Trains one cross-encoder per cumulative field prefix (caption; +title and
description; +link title and description; +board titles; +engaged query
tokens) on the same seeded corpus and vocabulary, and prints held-out
accuracy per step.

    python3 scripts/run_ablation.py --n-queries 2500 --n-pins 12500
"""

import argparse
import json
import logging
import time

from relsearch import pipeline as pl
from relsearch.teacher import TeacherTrainConfig


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=5)
    parser.add_argument("--n-queries", type=int, default=2_500)
    parser.add_argument("--n-pins", type=int, default=12_500)
    parser.add_argument("--vocab-size", type=int, default=4_000)
    parser.add_argument("--epochs", type=int, default=12)
    parser.add_argument("--out", default=None, help="optional JSONL output path")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    t0 = time.perf_counter()
    corpus = pl.generate_synthetic(
        seed=args.seed,
        n_queries=args.n_queries,
        n_pins=args.n_pins,
        vocab_size=args.vocab_size,
    )
    rows = pl.run_text_ablation(
        corpus,
        train_config=TeacherTrainConfig(epochs=args.epochs, batch_size=256, seed=7),
    )
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    print(f"total {time.perf_counter() - t0:.1f}s")

    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        print(f"rows -> {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
