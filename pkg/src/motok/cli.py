"""Command-line entry point wiring all pipeline stages.

Exit codes: 0 success, 2 usage error, 3 config error, 4 data error,
5 numeric failure. Failures print a single machine-parsable line to
stderr: ``error:<category>: <message>``. Every command writes a
``run.json`` provenance record into --out.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .config import RunConfig, build_config, config_hash
from .corpus import CorpusConfig, build_corpus, load_corpus, write_motions
from .errors import BoundsError, ConfigError, DataError, MotokError
from .guidance import generate_guided, sweep_guidance
from .metrics import evaluate_pipeline, save_report
from .quantizer import (ScaleSchedule, multiscale_quantize, save_token_sets,
                        usage_csv_rows)
from .sar import SarModel, train_sar
from .text import embed_text
from .tokenizer import LgTokenizer
from .training import train_tokenizer


def edit_mask_spec(spec: str, frames: int) -> np.ndarray:
    """'a:b[,c:d...]' half-open frame intervals set to 1; 'all' / 'none'."""
    spec = spec.strip().lower()
    if spec == "all":
        return np.ones(frames, dtype=np.float32)
    if spec == "none":
        return np.zeros(frames, dtype=np.float32)
    flags = np.zeros(frames, dtype=np.float32)
    for part in spec.split(","):
        try:
            a_s, b_s = part.split(":")
            a, b = int(a_s), int(b_s)
        except ValueError as e:
            raise BoundsError(f"bad edit-mask interval {part!r}") from e
        if a >= b or a < 0 or b > frames:
            raise BoundsError(f"edit-mask interval {a}:{b} outside [0, {frames}]")
        flags[a:b] = 1.0
    return flags


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--preset", default=None, choices=["tiny", "mini", "mid", "full"])
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty --out")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motok", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    g.add_argument("--size", type=int, default=None)
    _add_common(g)

    t = sub.add_parser("train-tok", help="train the tokenizer/detokenizer")
    t.add_argument("--corpus", default=None)
    t.add_argument("--epochs", type=int, default=None)
    _add_common(t)

    s = sub.add_parser("train-sar", help="train the scale-autoregressive model")
    s.add_argument("--corpus", default=None)
    s.add_argument("--tokenizer", default=None)
    s.add_argument("--epochs", type=int, default=None)
    _add_common(s)

    r = sub.add_parser("reconstruct", help="tokenize-quantize-detokenize a split")
    r.add_argument("--corpus", default=None)
    r.add_argument("--tokenizer", default=None)
    r.add_argument("--split", default="test", choices=["train", "val", "test"])
    r.add_argument("--g", type=float, default=0.0)
    _add_common(r)

    gen = sub.add_parser("generate", help="generate motion from text")
    gen.add_argument("--text", required=True)
    gen.add_argument("--g", type=float, default=None)
    gen.add_argument("--edit-mask", default=None)
    gen.add_argument("--frames", type=int, default=None)
    gen.add_argument("--tokenizer", default=None)
    gen.add_argument("--sar", default=None)
    gen.add_argument("--corpus", default=None,
                     help="corpus dir; when given, output is denormalized with its stats")
    gen.add_argument("--temperature", type=float, default=None)
    gen.add_argument("--top-k", type=int, default=None)
    _add_common(gen)

    e = sub.add_parser("eval", help="full metric report with confidence intervals")
    e.add_argument("--corpus", default=None)
    e.add_argument("--tokenizer", default=None)
    e.add_argument("--sar", default=None)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--g", type=float, default=None)
    e.add_argument("--repeats", type=int, default=None)
    _add_common(e)

    w = sub.add_parser("sweep-g", help="metric sweep over guidance scales")
    w.add_argument("--corpus", default=None)
    w.add_argument("--tokenizer", default=None)
    w.add_argument("--sar", default=None)
    w.add_argument("--split", default="test", choices=["train", "val", "test"])
    w.add_argument("--g-list", default=None, help="comma-separated guidance scales")
    _add_common(w)

    st = sub.add_parser("stats", help="export codebook usage statistics")
    st.add_argument("--corpus", default=None)
    st.add_argument("--tokenizer", default=None)
    st.add_argument("--split", default="train", choices=["train", "val", "test"])
    _add_common(st)
    return p


def _prepare_out(args) -> Path:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cfg(args, **overrides) -> RunConfig:
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.deterministic:
        overrides["deterministic"] = True
    return build_config(args.preset, args.config, overrides)


def _split_indices(corpus, name: str):
    train, val, test = corpus.splits()
    idx = {"train": train, "val": val, "test": test}[name]
    if not len(idx):
        raise DataError(f"{name} split is empty for a {len(corpus)}-record corpus")
    return idx


def _load_tokenizer(args, cfg) -> LgTokenizer:
    path = getattr(args, "tokenizer", None) or cfg.tokenizer_ckpt
    if not path:
        raise ConfigError("no tokenizer checkpoint given (--tokenizer or tokenizer_ckpt)")
    return LgTokenizer.load(path)


def _load_sar(args, cfg, tok: LgTokenizer, required: bool = True) -> SarModel | None:
    path = getattr(args, "sar", None) or cfg.sar_ckpt
    if not path:
        if required:
            raise ConfigError("no SAR checkpoint given (--sar or sar_ckpt)")
        return None
    sar = SarModel.load(path)
    if sar.tokenizer_hash and sar.tokenizer_hash != tok.config_hash():
        raise ConfigError("SAR checkpoint was trained against a different tokenizer "
                          f"(hash {sar.tokenizer_hash} != {tok.config_hash()})")
    return sar


def _corpus_for(args, cfg):
    path = getattr(args, "corpus", None) or cfg.corpus_dir
    if not path:
        raise ConfigError("no corpus directory given (--corpus or corpus_dir)")
    return load_corpus(path, d_text=cfg.d_text)


def _tokenize_split(tok: LgTokenizer, corpus, indices):
    schedule = ScaleSchedule(tok.cfg.schedule)
    sets, texts = [], []
    with T.no_grad():
        for i in indices:
            rec, ctx = corpus.records[i]
            z = tok.tokenize(rec.data[None], [ctx])
            ts, _, _, _ = multiscale_quantize(z.data[0], schedule, tok.book)
            sets.append(ts)
            texts.append(ctx)
    return sets, texts


# --- command bodies; each returns the artifact list -------------------------


def cmd_gen_data(args, cfg: RunConfig, out: Path) -> list[str]:
    size = args.size or cfg.corpus_size
    build_corpus(size, cfg.seed, out,
                 CorpusConfig(channels=cfg.channels, frames_min=cfg.frames_min,
                              frames_max=cfg.frames_max))
    return ["manifest.json", "motions.bin", "captions.txt"]


def cmd_train_tok(args, cfg: RunConfig, out: Path) -> list[str]:
    corpus = _corpus_for(args, cfg)
    train_tokenizer(corpus, cfg, seed=cfg.seed, out_dir=out, epochs=args.epochs)
    return ["tok_best.ckpt", "tok_final.ckpt", "tok_log.csv"]


def cmd_train_sar(args, cfg: RunConfig, out: Path) -> list[str]:
    tok = _load_tokenizer(args, cfg)
    # the SAR inherits the tokenizer's structural config; training keys are ours
    sar_cfg_d = tok.cfg.to_dict()
    for key in ("sar_layers", "sar_heads", "sar_dim", "sar_epochs", "sar_lr",
                "batch_size", "lr_drop_factor", "weight_decay", "clip",
                "condition_drop", "seed", "deterministic"):
        sar_cfg_d[key] = getattr(cfg, key)
    sar_cfg_d["schedule"] = tuple(sar_cfg_d["schedule"])
    sar_cfg_d["g_sweep"] = tuple(sar_cfg_d["g_sweep"])
    sar_cfg = RunConfig(**sar_cfg_d)
    corpus = _corpus_for(args, cfg)
    train_idx = _split_indices(corpus, "train")
    _, val_r, test_r = corpus.splits()
    val_idx = val_r if len(val_r) else test_r
    sets, texts = _tokenize_split(tok, corpus, train_idx)
    val_sets, val_texts = (_tokenize_split(tok, corpus, val_idx) if len(val_idx) else ([], []))
    save_token_sets(out / "tokens_train.bin", sets)
    if val_sets:
        save_token_sets(out / "tokens_val.bin", val_sets)
    train_sar(sets, texts, val_sets, val_texts, sar_cfg, tok.book, seed=cfg.seed,
              tokenizer_hash=tok.config_hash(), out_dir=out, epochs=args.epochs)
    arts = ["sar_best.ckpt", "sar_final.ckpt", "sar_log.csv", "tokens_train.bin"]
    if val_sets:
        arts.append("tokens_val.bin")
    return arts


def cmd_reconstruct(args, cfg: RunConfig, out: Path) -> list[str]:
    tok = _load_tokenizer(args, cfg)
    corpus = _corpus_for(args, cfg)
    indices = _split_indices(corpus, args.split)
    report = evaluate_pipeline(tok, None, corpus, indices, g=args.g, seed=cfg.seed, repeats=1)
    save_report(report, out)
    from .guidance import guided_decode
    from .quantizer import multiscale_quantize_batch

    schedule = ScaleSchedule(tok.cfg.schedule)
    recon = []
    for i in indices:
        rec, ctx = corpus.records[i]
        with T.no_grad():
            z = tok.tokenize(rec.data[None], [ctx])
            _, z_hat, _, _, _, _ = multiscale_quantize_batch(z.data, schedule, tok.book)
        m_hat = guided_decode(tok, z_hat, [ctx], rec.frames, args.g)
        recon.append(corpus.denormalize(m_hat[0]))
    write_motions(out / "reconstructions.bin", recon)
    return ["report.csv", "report.json", "reconstructions.bin"]


def cmd_generate(args, cfg: RunConfig, out: Path) -> list[str]:
    tok = _load_tokenizer(args, cfg)
    sar = _load_sar(args, cfg, tok)
    g = args.g if args.g is not None else cfg.guidance_scale
    frames = args.frames or cfg.frames_max
    temperature = args.temperature if args.temperature is not None else cfg.temperature
    top_k = args.top_k if args.top_k is not None else cfg.top_k
    text = embed_text(args.text, d_text=cfg.d_text)
    mask = edit_mask_spec(args.edit_mask, frames) if args.edit_mask else None
    motion = generate_guided(tok, sar, text, frames, g, cfg.seed,
                             temperature=temperature, top_k=top_k, edit_mask=mask)
    corpus_path = getattr(args, "corpus", None) or cfg.corpus_dir
    if corpus_path:
        corpus = load_corpus(corpus_path, d_text=cfg.d_text)
        motion = corpus.denormalize(motion)
    write_motions(out / "motion.bin", [motion])
    (out / "captions.txt").write_text(args.text + "\n", encoding="utf-8")
    ts = sar.generate(text, tok.book, temperature=temperature, top_k=top_k, seed=cfg.seed)
    save_token_sets(out / "tokens.bin", [ts])
    return ["motion.bin", "captions.txt", "tokens.bin"]


def cmd_eval(args, cfg: RunConfig, out: Path) -> list[str]:
    tok = _load_tokenizer(args, cfg)
    sar = _load_sar(args, cfg, tok, required=False)
    corpus = _corpus_for(args, cfg)
    indices = _split_indices(corpus, args.split)
    g = args.g if args.g is not None else cfg.guidance_scale
    repeats = args.repeats if args.repeats is not None else cfg.eval_repeats
    report = evaluate_pipeline(tok, sar, corpus, indices, g=g, seed=cfg.seed,
                               repeats=repeats, temperature=cfg.temperature,
                               top_k=cfg.top_k)
    save_report(report, out)
    return ["report.csv", "report.json"]


def cmd_sweep_g(args, cfg: RunConfig, out: Path) -> list[str]:
    tok = _load_tokenizer(args, cfg)
    sar = _load_sar(args, cfg, tok)
    corpus = _corpus_for(args, cfg)
    indices = _split_indices(corpus, args.split)
    if args.g_list:
        g_values = tuple(float(v) for v in args.g_list.split(",") if v.strip())
    else:
        g_values = cfg.g_sweep
    rows = sweep_guidance(tok, sar, corpus, indices, g_values, seed=cfg.seed)
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["g", "toy_fid", "recon", "semantic_accuracy"])
        w.writeheader()
        w.writerows(rows)
    return ["sweep.csv"]


def cmd_stats(args, cfg: RunConfig, out: Path) -> list[str]:
    tok = _load_tokenizer(args, cfg)
    corpus = _corpus_for(args, cfg)
    indices = _split_indices(corpus, args.split)
    tok.book.reset_usage()
    _tokenize_split(tok, corpus, indices)
    with open(out / "usage.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scale", "entry", "count", "frequency"])
        w.writerows(usage_csv_rows(tok.book))
    return ["usage.csv"]


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-tok": cmd_train_tok,
    "train-sar": cmd_train_sar,
    "reconstruct": cmd_reconstruct,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "sweep-g": cmd_sweep_g,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    start = time.time()
    try:
        cfg = _cfg(args)
        out = _prepare_out(args)
        artifacts = _COMMANDS[args.command](args, cfg, out)
        record = {
            "command": args.command,
            "config_hash": config_hash(cfg),
            "seed": cfg.seed,
            "start": _stamp(start, cfg.deterministic),
            "end": _stamp(time.time(), cfg.deterministic),
            "artifacts": sorted(artifacts),
            "version": __version__,
        }
        (out / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True))
        return 0
    except MotokError as e:
        print(f"error:{e.category}: {e}", file=sys.stderr)
        return e.exit_code
    except FloatingPointError as e:
        print(f"error:numeric: {e}", file=sys.stderr)
        return 5


def _stamp(t: float, deterministic: bool) -> str:
    # deterministic runs must produce byte-identical artifacts, run.json included
    if deterministic:
        return "1970-01-01T00:00:00Z"
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


if __name__ == "__main__":
    sys.exit(main())
