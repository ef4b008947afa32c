#!/usr/bin/env python3
"""Train a language-dropped pipeline and sweep the guidance scale, in both
the text-conditioned and the free-form (no text in the generative model)
settings. Prints semantic accuracy per g."""

import argparse
import tempfile
from pathlib import Path

from motok.corpus import CorpusConfig, build_corpus, load_corpus
from motok.experiments import guidance_accuracy_curve, run_tokenizer_variant, train_sar_on


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tok-steps", type=int, default=700)
    ap.add_argument("--sar-steps", type=int, default=1200)
    ap.add_argument("--g-list", default="0,0.5,1,2")
    args = ap.parse_args()

    tmp = Path(tempfile.mkdtemp(prefix="guidance_"))
    build_corpus(512, seed=100, out_dir=tmp, config=CorpusConfig(frames_min=48, frames_max=48))
    corpus = load_corpus(tmp)
    _, _, test_idx = corpus.splits()
    g_values = [float(v) for v in args.g_list.split(",")]

    run = run_tokenizer_variant(corpus, seed=args.seed, steps=args.tok_steps, text_drop=0.10)
    sar, val_ppl = train_sar_on(run.model, corpus, seed=args.seed, steps=args.sar_steps,
                                condition_drop=0.1)
    print(f"tokenizer val recon {run.val_recon:.4f}; SAR val perplexity {val_ppl:.2f}")
    for free_form in (False, True):
        curve = guidance_accuracy_curve(run.model, sar, corpus, list(test_idx), g_values,
                                        seed=args.seed, free_form=free_form)
        label = "free-form" if free_form else "text-conditioned"
        print(f"{label:>16}: " + "  ".join(f"g={g}: {a:.3f}" for g, a in curve.items()))


if __name__ == "__main__":
    main()
