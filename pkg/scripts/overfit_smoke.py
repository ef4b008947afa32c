#!/usr/bin/env python3
"""Overfit a 16-record corpus with the tiny preset and report when the
reconstruction loss crosses 0.05, then overfit a SAR on the same tokens."""

import argparse
import tempfile
from pathlib import Path

from motok.config import build_config
from motok.corpus import build_corpus, load_corpus
from motok.experiments import train_sar_on
from motok.training import train_tokenizer


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--sar-steps", type=int, default=3000)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    out = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="overfit_"))
    data = out / "data"
    build_corpus(16, seed=args.seed, out_dir=data)
    corpus = load_corpus(data)
    cfg = build_config("tiny")
    model, hist = train_tokenizer(corpus, cfg, seed=args.seed, max_steps=args.steps,
                                  epochs=args.steps, out_dir=out / "tok",
                                  log_every_epoch=False)
    hit = next((h["step"] for h in hist if h["train_recon"] < 0.05), None)
    print(f"tokenizer: final recon {hist[-1]['train_recon']:.4f}; "
          f"first < 0.05 at step {hit}")
    sar, _ = train_sar_on(model, corpus, seed=args.seed, steps=args.sar_steps,
                          sar_epochs=args.sar_steps)
    from motok.experiments import tokenize_split
    from motok.sar import eval_sar

    train_idx, _, _ = corpus.splits()
    sets, texts = tokenize_split(model, corpus, train_idx)
    _, ppl = eval_sar(sar, sets, texts, model.book, 16)
    print(f"sar: train perplexity {ppl:.3f} after <= {args.sar_steps} steps")
    print(f"artifacts under {out}")


if __name__ == "__main__":
    main()
