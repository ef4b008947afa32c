"""Decode-time language guidance and edit-mask decoding.

Guided decode extrapolates away from the unconditional branch in motion
space: (1+g) * conditional - g * unconditional, both branches produced by
the same detokenizer (the unconditional one through the learned null
context). Works in normalized feature space; denormalization is affine,
so the extrapolation commutes with it.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .quantizer import dequantize
from .text import TextContext
from .tokenizer import LgTokenizer


def guided_decode(model: LgTokenizer, z_hat: np.ndarray, texts, frames: int,
                  g: float) -> np.ndarray:
    """(1+g) * detokenize(z, t) - g * detokenize(z, null); [B, F, C]."""
    if g < 0 or not np.isfinite(g):
        raise ConfigError(f"guidance scale must be finite and >= 0, got {g}")
    if isinstance(texts, TextContext) or texts is None:
        texts = [texts] * z_hat.shape[0]
    all_empty = all(t is None or t.is_empty for t in texts)
    with T.no_grad():
        if all_empty:
            m_u = model.detokenize(z_hat, [None] * len(texts), frames).data
            if g > 0:
                warnings.warn("guided_decode with empty context: conditional and "
                              "unconditional branches coincide", stacklevel=2)
            return m_u
        m_c = model.detokenize(z_hat, texts, frames).data
        if g == 0:
            return m_c
        m_u = model.detokenize(z_hat, [None] * len(texts), frames).data
    gf = np.float32(g)
    return (1 + gf) * m_c - gf * m_u


def edit_decode(model: LgTokenizer, z_hat: np.ndarray, texts, frames: int,
                edit_mask: np.ndarray) -> np.ndarray:
    """Per-frame text routing: frames with mask 0 decode unconditionally."""
    if isinstance(texts, TextContext) or texts is None:
        texts = [texts] * z_hat.shape[0]
    with T.no_grad():
        return model.detokenize(z_hat, texts, frames, edit_mask=edit_mask).data


def generate_motion_tokens(sar, text, book, temperature: float, top_k, seed: int):
    """Sample a TokenSet and dequantize it for the detokenizer."""
    ts = sar.generate(text, book, temperature=temperature, top_k=top_k, seed=seed)
    z_hat = dequantize([ts], book)
    return ts, z_hat


def generate_guided(tok: LgTokenizer, sar, text, frames: int, g: float, seed: int,
                    temperature: float = 1.0, top_k=None,
                    edit_mask: np.ndarray | None = None) -> np.ndarray:
    """Full generation flow: SAR sampling, dequantization, guided decode.

    Returns one [F, C] motion in normalized feature space."""
    _, z_hat = generate_motion_tokens(sar, text, tok.book, temperature, top_k, seed)
    if edit_mask is not None:
        cond = edit_decode(tok, z_hat, text, frames, edit_mask)
        if g == 0:
            return cond[0]
        with T.no_grad():
            m_u = tok.detokenize(z_hat, [None], frames).data
        gf = np.float32(g)
        return ((1 + gf) * cond - gf * m_u)[0]
    return guided_decode(tok, z_hat, text, frames, g)[0]


def sweep_guidance(tok: LgTokenizer, sar, corpus, indices, g_values, seed: int,
                   repeats: int = 1) -> list[dict]:
    """One row of generation metrics per guidance scale."""
    from .metrics import evaluate_pipeline

    if not len(list(g_values)):
        raise ConfigError("empty guidance-scale list")
    rows = []
    for g in g_values:
        report = evaluate_pipeline(tok, sar, corpus, indices, g=float(g), seed=seed,
                                   repeats=repeats)
        rows.append({
            "g": float(g),
            "toy_fid": report.means["toy_fid"],
            "recon": report.means["recon_smooth_l1"],
            "semantic_accuracy": report.means["semantic_accuracy"],
        })
    return rows
