#!/usr/bin/env python3
"""Reconstruction error against token budget: train nested schedules under a
fixed step budget across several seeds and print the per-seed ordering."""

import argparse
import tempfile
from pathlib import Path

from motok.corpus import CorpusConfig, build_corpus, load_corpus
from motok.experiments import token_budget_trend


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--corpus-size", type=int, default=512)
    ap.add_argument("--steps", type=int, default=600)
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()

    tmp = Path(tempfile.mkdtemp(prefix="budget_"))
    build_corpus(args.corpus_size, seed=100, out_dir=tmp,
                 config=CorpusConfig(frames_min=48, frames_max=48))
    corpus = load_corpus(tmp)
    schedules = [(1, 2), (1, 2, 4), (1, 2, 4, 8)]
    seeds = [int(s) for s in args.seeds.split(",")]
    results = token_budget_trend(corpus, schedules, seeds, steps=args.steps)
    totals = [sum(s) for s in schedules]
    print(f"totals: {totals}")
    for seed, vals in results.items():
        mono = all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))
        print(f"seed {seed}: " + "  ".join(f"{t}tok={v:.4f}" for t, v in zip(totals, vals))
              + f"  monotone={mono}")


if __name__ == "__main__":
    main()
