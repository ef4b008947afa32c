"""Multi-scale residual vector quantization.

Per scale n: downsample the residual to s_n rows, snap each row to its
nearest codebook entry, upsample the picked entries back to T rows, and
subtract to form the next residual. The dequantized embedding is the sum
of the upsampled per-scale embeddings. Codebook learning is EMA-based
with dead-entry revival; gradients reach the encoder via straight-through.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BoundsError, ConfigError, DataError, FormatError, ShapeError

TOKENSET_MAGIC = b"TOKS"


@dataclass(frozen=True)
class ScaleSchedule:
    scales: tuple[int, ...]

    def __post_init__(self):
        if len(self.scales) < 1:
            raise ConfigError("schedule needs at least one scale")
        if self.scales[0] < 1:
            raise ConfigError("scales must be >= 1")
        if any(b < a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError(f"scales must be non-decreasing: {self.scales}")

    @property
    def n_scales(self) -> int:
        return len(self.scales)

    @property
    def latent_tokens(self) -> int:
        return self.scales[-1]

    @property
    def total_tokens(self) -> int:
        return int(sum(self.scales))


_interp_cache: dict[tuple[int, int], np.ndarray] = {}


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """Endpoint-preserving linear interpolation matrix [dst, src]."""
    key = (src, dst)
    if key in _interp_cache:
        return _interp_cache[key]
    m = np.zeros((dst, src), dtype=np.float32)
    if dst == 1:
        m[0, :] = 1.0 / src  # time mean
    elif src == 1:
        m[:, 0] = 1.0  # broadcast the single row
    else:
        pos = np.arange(dst) * (src - 1) / (dst - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, src - 1)
        frac = (pos - lo).astype(np.float32)
        m[np.arange(dst), lo] += 1.0 - frac
        m[np.arange(dst), hi] += frac
    _interp_cache[key] = m
    return m


def downsample(z: np.ndarray, s: int) -> np.ndarray:
    """[..., T, d] -> [..., s, d]; s=1 returns the time mean."""
    T = z.shape[-2]
    if not (1 <= s <= T):
        raise BoundsError(f"downsample target {s} outside [1, {T}]")
    if s == T:
        return z.copy()
    return _interp_matrix(T, s) @ z


def upsample(z: np.ndarray, T: int) -> np.ndarray:
    """[..., s, d] -> [..., T, d]; s=1 broadcasts the single row."""
    s = z.shape[-2]
    if s == T:
        return z.copy()
    if s > T:
        raise BoundsError(f"upsample source {s} longer than target {T}")
    return _interp_matrix(s, T) @ z


class Codebook:
    def __init__(self, size: int, dim: int, seed: int = 0, decay: float = 0.99,
                 revival_steps: int = 256):
        if size < 2:
            raise ConfigError("codebook needs at least 2 entries")
        if not (0.0 < decay < 1.0):
            raise ConfigError("EMA decay must lie in (0, 1)")
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE]))
        self.entries = self.rng.normal(0.0, 1.0, size=(size, dim)).astype(np.float32)
        self.ema_counts = np.zeros(size, dtype=np.float64)
        self.ema_sums = np.zeros((size, dim), dtype=np.float64)
        self.usage = np.zeros(size, dtype=np.int64)
        self.scale_usage: dict[int, np.ndarray] = {}
        self.steps_unused = np.zeros(size, dtype=np.int64)
        self.decay = decay
        self.revival_steps = revival_steps
        self.revivals: list[tuple[int, int]] = []
        self.step = 0

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    def reset_usage(self):
        self.usage[:] = 0
        self.scale_usage.clear()


def quantize_nearest(rows: np.ndarray, book: Codebook, scale: int | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Nearest entry by Euclidean distance; ties go to the lowest index."""
    if book.size == 0:
        raise ConfigError("empty codebook")
    if rows.shape[-1] != book.dim:
        raise ShapeError(f"rows dim {rows.shape[-1]} != codebook dim {book.dim}")
    flat = rows.reshape(-1, book.dim).astype(np.float64)
    ent = book.entries.astype(np.float64)
    d2 = (flat * flat).sum(axis=1, keepdims=True) - 2.0 * flat @ ent.T + (ent * ent).sum(axis=1)
    idx = np.argmin(d2, axis=1)
    np.add.at(book.usage, idx, 1)
    if scale is not None:
        if scale not in book.scale_usage:
            book.scale_usage[scale] = np.zeros(book.size, dtype=np.int64)
        np.add.at(book.scale_usage[scale], idx, 1)
    emb = book.entries[idx].reshape(rows.shape)
    return idx.reshape(rows.shape[:-1]), emb


@dataclass
class TokenSet:
    tokens: list[np.ndarray]  # per-scale int32 index arrays
    schedule: ScaleSchedule

    def __post_init__(self):
        if len(self.tokens) != self.schedule.n_scales:
            raise ConfigError("token list length != schedule length")
        for t, s in zip(self.tokens, self.schedule.scales):
            if t.shape != (s,):
                raise ConfigError(f"scale expects {s} tokens, got {t.shape}")

    @property
    def total(self) -> int:
        return sum(t.shape[0] for t in self.tokens)

    def flat(self) -> np.ndarray:
        return np.concatenate(self.tokens)


def _books_for(schedule: ScaleSchedule, book) -> list[Codebook]:
    if isinstance(book, Codebook):
        return [book] * schedule.n_scales
    books = list(book)
    if len(books) != schedule.n_scales:
        raise ConfigError("per-scale codebook list length != schedule length")
    return books


def multiscale_quantize_batch(z: np.ndarray, schedule: ScaleSchedule, book
                              ) -> tuple[list[np.ndarray], np.ndarray, list[np.ndarray],
                                         np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Batched core: z [B, T, d].

    Returns (per-scale index arrays [B, s_n], cumulative z_hat [B, T, d],
    per-scale upsampled embeddings, final residual, per-scale downsampled
    residual rows, per-scale entry indices) -- the last two feed EMA updates.
    """
    if z.ndim != 3:
        raise ShapeError(f"expected [B, T, d], got {z.shape}")
    B, T, d = z.shape
    if schedule.latent_tokens != T:
        raise ConfigError(f"schedule ends at {schedule.latent_tokens}, latent length is {T}")
    books = _books_for(schedule, book)
    residual = z.astype(np.float32).copy()
    z_hat = np.zeros_like(residual)
    indices: list[np.ndarray] = []
    per_scale: list[np.ndarray] = []
    assign_rows: list[np.ndarray] = []
    assign_idx: list[np.ndarray] = []
    for n, s in enumerate(schedule.scales):
        rows = downsample(residual, s)
        idx, emb = quantize_nearest(rows, books[n], scale=n)
        up = upsample(emb, T)
        residual -= up
        z_hat += up
        indices.append(idx.astype(np.int32))
        per_scale.append(up)
        assign_rows.append(rows.reshape(-1, d))
        assign_idx.append(idx.reshape(-1))
    return indices, z_hat, per_scale, residual, assign_rows, assign_idx


def multiscale_quantize(z: np.ndarray, schedule: ScaleSchedule, book
                        ) -> tuple[TokenSet, np.ndarray, list[np.ndarray], np.ndarray]:
    """Single-sequence interface over [T, d] latents."""
    if z.ndim != 2:
        raise ShapeError(f"expected [T, d], got {z.shape}")
    idx, z_hat, per_scale, residual, _, _ = multiscale_quantize_batch(z[None], schedule, book)
    tokens = TokenSet(tokens=[i[0] for i in idx], schedule=schedule)
    return tokens, z_hat[0], [p[0] for p in per_scale], residual[0]


def dequantize(token_sets: list[TokenSet], book) -> np.ndarray:
    """Rebuild z_hat [B, T, d] from stored tokens."""
    schedule = token_sets[0].schedule
    books = _books_for(schedule, book)
    T = schedule.latent_tokens
    out = np.zeros((len(token_sets), T, books[0].dim), dtype=np.float32)
    for b, ts in enumerate(token_sets):
        for n, idx in enumerate(ts.tokens):
            out[b] += upsample(books[n].entries[idx], T)
    return out


def codebook_update(book: Codebook, rows: np.ndarray, indices: np.ndarray,
                    eps: float = 1e-5):
    """EMA update of counts and sums; revives entries unused for too long."""
    book.step += 1
    if rows.shape[0] == 0:
        return
    V = book.size
    counts = np.bincount(indices, minlength=V).astype(np.float64)
    sums = np.zeros((V, book.dim), dtype=np.float64)
    np.add.at(sums, indices, rows.astype(np.float64))
    book.ema_counts = book.decay * book.ema_counts + (1 - book.decay) * counts
    book.ema_sums = book.decay * book.ema_sums + (1 - book.decay) * sums
    n = book.ema_counts.sum()
    smoothed = (book.ema_counts + eps) / (n + V * eps) * n
    live = counts > 0
    book.entries[live] = (book.ema_sums[live] / smoothed[live, None]).astype(np.float32)
    book.steps_unused[live] = 0
    book.steps_unused[~live] += 1
    dead = np.flatnonzero(book.steps_unused >= book.revival_steps)
    for v in dead:
        pick = int(book.rng.integers(rows.shape[0]))
        book.entries[v] = rows[pick].astype(np.float32)
        book.ema_counts[v] = 1.0
        book.ema_sums[v] = rows[pick].astype(np.float64)
        book.steps_unused[v] = 0
        book.revivals.append((book.step, int(v)))


def usage_stats(book: Codebook) -> dict:
    """Histogram and normalized entropy of recorded usage, overall and per scale."""

    def stats(counts: np.ndarray) -> dict:
        total = int(counts.sum())
        if total == 0:
            return {"counts": counts.tolist(), "freq": None, "entropy": None}
        freq = counts / total
        nz = freq[freq > 0]
        ent = float(-(nz * np.log(nz)).sum() / np.log(book.size))
        return {"counts": counts.tolist(), "freq": freq.tolist(), "entropy": ent}

    return {
        "overall": stats(book.usage),
        "per_scale": {n: stats(c) for n, c in sorted(book.scale_usage.items())},
    }


def usage_csv_rows(book: Codebook) -> list[tuple[int, int, int, float]]:
    """(scale, entry, count, frequency) rows for the stats export."""
    out = []
    for n, counts in sorted(book.scale_usage.items()):
        total = max(int(counts.sum()), 1)
        for v in range(book.size):
            out.append((n, v, int(counts[v]), counts[v] / total))
    return out


# --- TokenSet caching ------------------------------------------------------


def save_token_sets(path, token_sets: list[TokenSet]):
    with open(path, "wb") as f:
        for ts in token_sets:
            f.write(TOKENSET_MAGIC)
            f.write(struct.pack("<I", ts.schedule.n_scales))
            f.write(struct.pack(f"<{ts.schedule.n_scales}I", *ts.schedule.scales))
            for t in ts.tokens:
                if t.max(initial=0) >= 1 << 16:
                    raise DataError("token index exceeds u16 range")
                f.write(np.ascontiguousarray(t, dtype="<u2").tobytes())


def load_token_sets(path) -> list[TokenSet]:
    raw = Path(path).read_bytes()
    out: list[TokenSet] = []
    off = 0
    while off < len(raw):
        if raw[off:off + 4] != TOKENSET_MAGIC:
            raise FormatError(f"{path}: bad token-set magic at offset {off}")
        off += 4
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        scales = struct.unpack_from(f"<{n}I", raw, off)
        off += 4 * n
        schedule = ScaleSchedule(tuple(int(s) for s in scales))
        tokens = []
        for s in scales:
            arr = np.frombuffer(raw, dtype="<u2", count=s, offset=off).astype(np.int32)
            off += 2 * s
            tokens.append(arr)
        out.append(TokenSet(tokens=tokens, schedule=schedule))
    return out
