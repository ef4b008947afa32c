"""Desk-scale metric stack.

Learned evaluators are replaced by stated proxies: toy_fid is a Fréchet
distance between Gaussian fits of fixed statistical motion features, and
semantic_accuracy is a rule-based trajectory classifier checked against
the caption grammar. Reconstruction metrics live in normalized feature
space. Guidance scale g applies to both the generation decode and the
reconstruction decode (at g=0 both reduce to the plain conditional decode).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import FPS, Corpus, direction_bucket, parse_caption, speed_bucket
from .errors import ConfigError, DataError
from .quantizer import ScaleSchedule, multiscale_quantize_batch, usage_stats
from .tokenizer import LgTokenizer

log = logging.getLogger(__name__)


def motion_features(data: np.ndarray) -> np.ndarray:
    """Per channel: mean, population std, mean |first difference|, last-first."""
    if data.ndim != 2 or data.shape[0] < 2:
        raise DataError(f"motion_features needs [F>=2, C] data, got {data.shape}")
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    mad = np.abs(np.diff(data, axis=0)).mean(axis=0)
    delta = data[-1] - data[0]
    return np.stack([mean, std, mad, delta], axis=1).reshape(-1)


def toy_fid(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Fréchet distance between Gaussian fits (diagonal-loaded covariances)."""
    for name, f in (("A", feats_a), ("B", feats_b)):
        if f.ndim != 2 or f.shape[0] < 2:
            raise DataError(f"toy_fid: set {name} needs >= 2 samples, got {f.shape}")
    mu_a, mu_b = feats_a.mean(axis=0), feats_b.mean(axis=0)
    d = feats_a.shape[1]
    load = 1e-6 * np.eye(d)
    sig_a = np.atleast_2d(np.cov(feats_a, rowvar=False)) + load
    sig_b = np.atleast_2d(np.cov(feats_b, rowvar=False)) + load
    # Tr((sig_a sig_b)^{1/2}) via the symmetric product sqrt(A) B sqrt(A)
    wa, ua = np.linalg.eigh(sig_a)
    a_half = (ua * np.sqrt(np.clip(wa, 0, None))) @ ua.T
    m = a_half @ sig_b @ a_half
    m = (m + m.T) / 2
    wm = np.linalg.eigh(m)[0]
    tr_sqrt = np.sqrt(np.clip(wm, 0, None)).sum()
    d2 = float(((mu_a - mu_b) ** 2).sum() + np.trace(sig_a) + np.trace(sig_b) - 2 * tr_sqrt)
    return max(d2, 0.0)


# --- rule-based trajectory classifier ---------------------------------------

_TURN_YAW_THRESHOLD = 0.5
_JUMP_VERTICAL_STD = 0.10
_RUN_FREQ_THRESHOLD = 1.75
_SMOOTH_WINDOW = 5


def _smooth(x: np.ndarray, k: int = _SMOOTH_WINDOW) -> np.ndarray:
    """Moving average per channel; judges semantics, not frame-level noise."""
    if x.shape[0] <= k:
        return x
    kernel = np.ones(k) / k
    return np.stack([np.convolve(x[:, c], kernel, mode="valid")
                     for c in range(x.shape[1])], axis=1)


def classify_motion(raw: np.ndarray) -> tuple[str, str, str]:
    """(action class, speed bucket, direction bucket) from denormalized data."""
    if raw.shape[0] < 2:
        raise DataError("classify_motion needs at least 2 frames")
    dt = 1.0 / FPS
    data = _smooth(raw)
    dyaw = float(data[-1, 2] - data[0, 2])
    step = np.diff(data[:, :2], axis=0)
    speed = float(np.linalg.norm(step, axis=1).mean() / dt)
    sbucket = speed_bucket(speed)
    if abs(dyaw) > _TURN_YAW_THRESHOLD:
        side = "left" if dyaw > 0 else "right"
        return (f"turn_{side}", sbucket, side)
    if float(data[:, 5].std()) > _JUMP_VERTICAL_STD:
        cls = "jump"
    else:
        amp = float(data[:, 3].std()) * np.sqrt(2)
        freq = float(np.abs(np.diff(data[:, 3])).mean() / max(4 * amp * dt, 1e-9))
        cls = "run" if freq > _RUN_FREQ_THRESHOLD else "walk"
    disp = data[-1, :2] - data[0, :2]
    heading = float(np.arctan2(disp[1], disp[0])) if np.linalg.norm(disp) > 1e-6 else 0.0
    return cls, sbucket, direction_bucket(heading)


def semantic_accuracy(raw_motions: list[np.ndarray], captions: list[str]) -> float:
    """Fraction of motions whose predicted label tuple matches the caption's."""
    if not raw_motions:
        raise DataError("semantic_accuracy over an empty set")
    if len(raw_motions) != len(captions):
        raise DataError("motions and captions differ in length")
    hits = 0
    for raw, caption in zip(raw_motions, captions):
        try:
            expected = parse_caption(caption)
        except DataError:
            log.warning("unparsable caption counted as mismatch: %r", caption)
            continue
        if classify_motion(raw) == expected:
            hits += 1
    return hits / len(raw_motions)


# --- pipeline evaluation ------------------------------------------------------


@dataclass
class MetricReport:
    means: dict[str, float]
    ci95: dict[str, float]
    values: dict[str, list[float]]
    sample_count: int
    repeats: int
    g: float
    codebook_entropy: dict[int, float | None] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float, float]]:
        return [(k, self.means[k], self.ci95[k]) for k in sorted(self.means)]


def _ci95(values: list[float]) -> float:
    if len(values) <= 1:
        return 0.0
    return float(1.96 * np.std(values, ddof=1) / np.sqrt(len(values)))


def _recon_pass(tok: LgTokenizer, corpus: Corpus, indices, g: float):
    """Deterministic reconstruction metrics over the split (guided decode)."""
    from .guidance import guided_decode

    schedule = ScaleSchedule(tok.cfg.schedule)
    sl1_num, sq_num, count = 0.0, 0.0, 0
    recon_feats, recon_raw = [], []
    by_frames: dict[int, list[int]] = {}
    for i in indices:
        by_frames.setdefault(corpus.records[i][0].frames, []).append(i)
    for frames, idxs in sorted(by_frames.items()):
        for lo in range(0, len(idxs), 16):
            chunk = idxs[lo:lo + 16]
            motions = np.stack([corpus.records[i][0].data for i in chunk])
            texts = [corpus.records[i][1] for i in chunk]
            with T.no_grad():
                z = tok.tokenize(motions, texts)
                _, z_hat, _, _, _, _ = multiscale_quantize_batch(z.data, schedule, tok.book)
            m_hat = guided_decode(tok, z_hat, texts, frames, g)
            err = m_hat - motions
            ae = np.abs(err)
            sl1_num += float(np.where(ae < 1, 0.5 * err * err, ae - 0.5).sum())
            sq_num += float((err * err).sum())
            count += err.size
            for b in range(len(chunk)):
                raw = corpus.denormalize(m_hat[b])
                recon_raw.append(raw)
                recon_feats.append(motion_features(raw))
    return sl1_num / count, float(np.sqrt(sq_num / count)), recon_raw, np.stack(recon_feats)


def evaluate_pipeline(tok: LgTokenizer, sar, corpus: Corpus, indices, g: float,
                      seed: int, repeats: int = 20, temperature: float = 1.0,
                      top_k=None) -> MetricReport:
    """Metric stack over a corpus split; repeats regenerate with fresh seeds
    and the report carries mean +- 1.96 * std / sqrt(repeats) per metric."""
    indices = list(indices)
    if not indices:
        raise DataError("evaluate_pipeline over an empty split")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    if sar is not None and sar.tokenizer_hash and sar.tokenizer_hash != tok.config_hash():
        raise ConfigError("SAR checkpoint was trained against a different tokenizer "
                          f"(hash {sar.tokenizer_hash} != {tok.config_hash()})")
    captions = [corpus.records[i][0].caption for i in indices]
    real_feats = np.stack([motion_features(corpus.denormalize(corpus.records[i][0].data))
                           for i in indices])
    tok.book.reset_usage()
    recon_sl1, recon_rmse, recon_raw, recon_feats = _recon_pass(tok, corpus, indices, g)
    entropy = {n: s["entropy"] for n, s in usage_stats(tok.book)["per_scale"].items()}
    perplexity = float("nan")
    if sar is not None:
        from .sar import eval_sar
        from .quantizer import multiscale_quantize

        schedule = ScaleSchedule(tok.cfg.schedule)
        sets, texts = [], []
        with T.no_grad():
            for i in indices:
                rec, ctx = corpus.records[i]
                z = tok.tokenize(rec.data[None], [ctx])
                ts, _, _, _ = multiscale_quantize(z.data[0], schedule, tok.book)
                sets.append(ts)
                texts.append(ctx)
        _, perplexity = eval_sar(sar, sets, texts, tok.book, batch_size=16)

    values: dict[str, list[float]] = {k: [] for k in
                                      ("recon_smooth_l1", "recon_rmse", "toy_fid",
                                       "semantic_accuracy", "perplexity")}
    for r in range(repeats):
        if sar is None:
            gen_raw, gen_feats = recon_raw, recon_feats
        else:
            from .guidance import generate_guided

            gen_raw = []
            for j, i in enumerate(indices):
                rec, ctx = corpus.records[i]
                gen_seed = int(np.random.SeedSequence([seed, r, j]).generate_state(1)[0])
                m = generate_guided(tok, sar, ctx, rec.frames, g, gen_seed,
                                    temperature=temperature, top_k=top_k)
                gen_raw.append(corpus.denormalize(m))
            gen_feats = np.stack([motion_features(m) for m in gen_raw])
        values["recon_smooth_l1"].append(recon_sl1)
        values["recon_rmse"].append(recon_rmse)
        values["toy_fid"].append(toy_fid(real_feats, gen_feats))
        values["semantic_accuracy"].append(semantic_accuracy(gen_raw, captions))
        values["perplexity"].append(perplexity)
    return MetricReport(
        means={k: float(np.mean(v)) for k, v in values.items()},
        ci95={k: _ci95(v) for k, v in values.items()},
        values=values,
        sample_count=len(indices),
        repeats=repeats,
        g=g,
        codebook_entropy=entropy,
    )


def save_report(report: MetricReport, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "mean", "ci95"])
        for row in report.rows():
            w.writerow(row)
    payload = {
        "means": report.means,
        "ci95": report.ci95,
        "values": report.values,
        "sample_count": report.sample_count,
        "repeats": report.repeats,
        "g": report.g,
        "codebook_entropy": {str(k): v for k, v in report.codebook_entropy.items()},
    }
    (out / "report.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
