"""Reusable experiment drivers for the trend studies.

These run small training jobs under controlled budgets and report the
numbers the acceptance suite and the scripts/ entry points compare:
reconstruction error against token budgets, text-guided against text-free
variants, language-drop ablations and guidance sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import RunConfig, build_config
from .corpus import Corpus
from .guidance import generate_guided
from .metrics import semantic_accuracy
from .quantizer import ScaleSchedule, multiscale_quantize
from .sar import SarModel, train_sar
from .tokenizer import LgTokenizer
from .training import eval_tokenizer, train_tokenizer


def trend_config(**overrides) -> RunConfig:
    """Small-but-trainable configuration shared by the trend studies."""
    base = dict(corpus_size=512, frames_min=64, frames_max=64, batch_size=32,
                lr=2e-3, epochs=1000)
    base.update(overrides)
    return build_config("tiny", overrides=base)


@dataclass
class TokenizerRun:
    model: LgTokenizer
    val_recon: float
    val_recon_no_text: float
    history: list[dict]


def run_tokenizer_variant(corpus: Corpus, seed: int, steps: int, **overrides) -> TokenizerRun:
    cfg = trend_config(**overrides)
    model, history = train_tokenizer(corpus, cfg, seed=seed, max_steps=steps,
                                     log_every_epoch=False)
    schedule = ScaleSchedule(cfg.schedule)
    _, val_idx, test_idx = corpus.splits()
    idx = val_idx if len(val_idx) else test_idx
    with_text = eval_tokenizer(model, corpus, idx, schedule, cfg.batch_size, with_text=True)
    without = eval_tokenizer(model, corpus, idx, schedule, cfg.batch_size, with_text=False)
    return TokenizerRun(model=model, val_recon=with_text, val_recon_no_text=without,
                        history=history)


def token_budget_trend(corpus: Corpus, schedules: list[tuple[int, ...]], seeds: list[int],
                       steps: int) -> dict[int, list[float]]:
    """val reconstruction per seed, ordered like ``schedules``."""
    out: dict[int, list[float]] = {s: [] for s in seeds}
    for seed in seeds:
        for schedule in schedules:
            run = run_tokenizer_variant(corpus, seed=seed, steps=steps,
                                        schedule=tuple(schedule),
                                        latent_tokens=schedule[-1])
            out[seed].append(run.val_recon)
    return out


def tokenize_split(model: LgTokenizer, corpus: Corpus, indices):
    schedule = ScaleSchedule(model.cfg.schedule)
    sets, texts = [], []
    with T.no_grad():
        for i in indices:
            rec, ctx = corpus.records[i]
            z = model.tokenize(rec.data[None], [ctx])
            ts, _, _, _ = multiscale_quantize(z.data[0], schedule, model.book)
            sets.append(ts)
            texts.append(ctx)
    return sets, texts


def train_sar_on(model: LgTokenizer, corpus: Corpus, seed: int, steps: int,
                 **overrides) -> tuple[SarModel, float]:
    """Train a SAR over the frozen tokenizer's tokens; returns val perplexity."""
    cfg_d = model.cfg.to_dict()
    cfg_d.update(overrides)
    cfg_d["schedule"] = tuple(cfg_d["schedule"])
    cfg_d["g_sweep"] = tuple(cfg_d["g_sweep"])
    cfg = RunConfig(**cfg_d)
    train_idx, val_idx, test_idx = corpus.splits()
    val = val_idx if len(val_idx) else test_idx
    sets, texts = tokenize_split(model, corpus, train_idx)
    val_sets, val_texts = tokenize_split(model, corpus, val)
    sar, history = train_sar(sets, texts, val_sets, val_texts, cfg, model.book, seed=seed,
                             tokenizer_hash=model.config_hash(), max_steps=steps)
    return sar, history[-1]["val_ppl"]


def caption_ablated_gap(run: TokenizerRun) -> float:
    """Reconstruction degradation when the caption is withheld."""
    return run.val_recon_no_text - run.val_recon


def guidance_accuracy_curve(tok: LgTokenizer, sar: SarModel, corpus: Corpus, indices,
                            g_values, seed: int, free_form: bool = False
                            ) -> dict[float, float]:
    """semantic_accuracy of guided generations per guidance scale.

    free_form samples tokens without text in the generative model (one shared
    sample per record across all g), isolating the detokenizer guidance."""
    caps = [corpus.records[i][0].caption for i in indices]
    if free_form:
        from .guidance import generate_motion_tokens, guided_decode

        zs = []
        for j, i in enumerate(indices):
            gen_seed = int(np.random.SeedSequence([seed, j]).generate_state(1)[0])
            _, z_hat = generate_motion_tokens(sar, None, tok.book, 1.0, None, gen_seed)
            zs.append(z_hat)
        out = {}
        for g in g_values:
            motions = []
            for j, i in enumerate(indices):
                rec, ctx = corpus.records[i]
                m = guided_decode(tok, zs[j], [ctx], rec.frames, float(g))
                motions.append(corpus.denormalize(m[0]))
            out[float(g)] = semantic_accuracy(motions, caps)
        return out
    out = {}
    for g in g_values:
        motions = []
        for j, i in enumerate(indices):
            rec, ctx = corpus.records[i]
            gen_seed = int(np.random.SeedSequence([seed, int(g * 1000), j]).generate_state(1)[0])
            m = generate_guided(tok, sar, ctx, rec.frames, float(g), gen_seed)
            motions.append(corpus.denormalize(m))
        out[float(g)] = semantic_accuracy(motions, caps)
    return out
