"""Training loops for the tokenizer/detokenizer stage.

Each step: sample a frame-grouped batch, apply language drop per record,
tokenize, multi-scale quantize (straight-through), detokenize, smooth-L1
plus commitment loss, backward, clipped AdamW step, EMA codebook update.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig
from .corpus import Corpus
from .errors import TrainingError
from .optim import AdamW, lr_at_epoch
from .quantizer import codebook_update, multiscale_quantize_batch, ScaleSchedule, usage_stats
from .tokenizer import LgTokenizer


def batches_by_frames(indices: list[int], frame_of: dict[int, int], batch_size: int,
                      rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, then group records with equal frame counts into batches."""
    order = list(indices)
    rng.shuffle(order)
    buckets: dict[int, list[int]] = {}
    out: list[list[int]] = []
    for i in order:
        b = buckets.setdefault(frame_of[i], [])
        b.append(i)
        if len(b) == batch_size:
            out.append(b.copy())
            b.clear()
    for b in buckets.values():
        if b:
            out.append(b)
    return out


def _stack_batch(corpus: Corpus, idxs: list[int]):
    motions = np.stack([corpus.records[i][0].data for i in idxs])
    texts = [corpus.records[i][1] for i in idxs]
    return motions, texts


def tokenizer_step(model: LgTokenizer, motions: np.ndarray, texts, schedule: ScaleSchedule,
                   beta: float, update_codebook: bool = True,
                   quantize: str = "codebook") -> tuple[T.Tensor, float]:
    """Forward pass to the loss; returns (loss node, recon smooth-L1 value).

    quantize="identity" bypasses the codebook (z_hat := z), the oracle mode
    used by the finite-difference gradient checks.
    """
    z = model.tokenize(motions, texts)
    if quantize == "identity":
        m_hat = model.detokenize(z, texts, motions.shape[1])
        recon = T.smooth_l1(m_hat, motions)
        return recon, float(recon.data)
    _, z_hat, _, _, rows, row_idx = multiscale_quantize_batch(z.data, schedule, model.book)
    zq = T.straight_through(z, z_hat)
    m_hat = model.detokenize(zq, texts, motions.shape[1])
    recon = T.smooth_l1(m_hat, motions)
    if beta:
        commit = T.mean_(T.square(T.sub(z, T.Tensor(z_hat))))
        loss = T.add(recon, T.scale(commit, beta))
    else:
        loss = recon
    if update_codebook:
        codebook_update(model.book, np.concatenate(rows), np.concatenate(row_idx))
    return loss, float(recon.data)


def eval_tokenizer(model: LgTokenizer, corpus: Corpus, indices, schedule: ScaleSchedule,
                   batch_size: int, with_text: bool = True) -> float:
    """Mean reconstruction smooth-L1 over the given records (no language drop)."""
    if not len(indices):
        return float("nan")
    frame_of = {i: corpus.records[i][0].frames for i in indices}
    rng = np.random.default_rng(0)
    total, count = 0.0, 0
    with T.no_grad():
        for batch in batches_by_frames(list(indices), frame_of, batch_size, rng):
            motions, texts = _stack_batch(corpus, batch)
            if not with_text:
                texts = [None] * len(batch)
            z = model.tokenize(motions, texts)
            _, z_hat, _, _, _, _ = multiscale_quantize_batch(z.data, schedule, model.book)
            m_hat = model.detokenize(z_hat, texts, motions.shape[1])
            recon = T.smooth_l1(m_hat, motions)
            total += float(recon.data) * len(batch)
            count += len(batch)
    return total / count


def train_tokenizer(corpus: Corpus, cfg: RunConfig, seed: int, out_dir=None,
                    epochs: int | None = None, max_steps: int | None = None,
                    log_every_epoch: bool = True) -> tuple[LgTokenizer, list[dict]]:
    """Returns (trained model, per-epoch history). Saves best/final checkpoints
    and a CSV log under out_dir when given."""
    schedule = ScaleSchedule(cfg.schedule)
    model = LgTokenizer(cfg, seed=seed)
    opt = AdamW(model.store, lr=cfg.lr, weight_decay=cfg.weight_decay, clip=cfg.clip)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    train_idx, val_idx, test_idx = corpus.splits()
    val_for_log = val_idx if len(val_idx) else test_idx
    frame_of = {i: corpus.records[i][0].frames for i in train_idx}
    n_epochs = epochs if epochs is not None else cfg.epochs
    history: list[dict] = []
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    best_val = float("inf")
    step = 0
    usage_mark = model.book.usage.copy()
    done = False
    for epoch in range(1, n_epochs + 1):
        opt.lr = lr_at_epoch(cfg.lr, epoch, n_epochs, cfg.lr_drop_factor)
        epoch_loss, epoch_recon, n_rec = 0.0, 0.0, 0
        for batch in batches_by_frames(list(train_idx), frame_of, cfg.batch_size, rng):
            motions, texts = _stack_batch(corpus, batch)
            if cfg.text_drop > 0:
                texts = [None if rng.random() < cfg.text_drop else t for t in texts]
            loss, recon_val = tokenizer_step(model, motions, texts, schedule, cfg.commitment)
            if not np.isfinite(float(loss.data)):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} step {step}: {float(loss.data)}")
            T.backward(loss)
            opt.step()
            epoch_loss += float(loss.data) * len(batch)
            epoch_recon += recon_val * len(batch)
            n_rec += len(batch)
            step += 1
            if max_steps is not None and step >= max_steps:
                done = True
                break
        row = {
            "epoch": epoch,
            "step": step,
            "train_loss": epoch_loss / max(n_rec, 1),
            "train_recon": epoch_recon / max(n_rec, 1),
            "val_loss": float("nan"),
            "lr": opt.lr,
            "codebook_entropy": float("nan"),
        }
        if log_every_epoch or done or epoch == n_epochs:
            row["val_loss"] = eval_tokenizer(model, corpus, val_for_log, schedule, cfg.batch_size)
            epoch_usage = model.book.usage - usage_mark
            usage_mark = model.book.usage.copy()
            total = epoch_usage.sum()
            if total > 0:
                freq = epoch_usage / total
                nz = freq[freq > 0]
                row["codebook_entropy"] = float(-(nz * np.log(nz)).sum() / np.log(model.book.size))
            if out and np.isfinite(row["val_loss"]) and row["val_loss"] < best_val:
                best_val = row["val_loss"]
                model.save(out / "tok_best.ckpt", extra={"epoch": epoch, "seed": seed})
        history.append(row)
        if done:
            break
    if out:
        model.save(out / "tok_final.ckpt", extra={"epoch": n_epochs, "seed": seed})
        with open(out / "tok_log.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["epoch", "step", "train_loss", "train_recon",
                                              "val_loss", "lr", "codebook_entropy"])
            w.writeheader()
            w.writerows(history)
    return model, history


def reconstruct_batch(model: LgTokenizer, motions: np.ndarray, texts) -> np.ndarray:
    """Full tokenize -> quantize -> detokenize round trip (no training)."""
    schedule = ScaleSchedule(model.cfg.schedule)
    with T.no_grad():
        z = model.tokenize(motions, texts)
        _, z_hat, _, _, _, _ = multiscale_quantize_batch(z.data, schedule, model.book)
        m_hat = model.detokenize(z_hat, texts, motions.shape[1])
    return m_hat.data
