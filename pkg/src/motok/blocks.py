"""Transformer building blocks: RMSNorm/LayerNorm, SwiGLU/GELU feed-forward,
rotary position embedding, masked multi-head attention, long skip fusion."""

from __future__ import annotations

import numpy as np

from .errors import BoundsError, ConfigError, ShapeError
from .tensor import Tensor, concat, gelu, make_op, matmul, mul, silu

NEG_INF = np.float32(-np.inf)

# Debug hook: when enabled, attention() appends its weight arrays here.
CAPTURE_ATTENTION = False
LAST_ATTENTION: list[np.ndarray] = []


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """y_i = gain_i * x_i / sqrt(mean_j x_j^2 + eps) over the last axis."""
    d = x.data.shape[-1] if x.data.ndim else 0
    if d < 1:
        raise ShapeError("rms_norm: empty feature axis")
    if gain.data.shape != (d,):
        raise ShapeError(f"rms_norm: gain shape {gain.data.shape} != ({d},)")
    ms = np.mean(x.data * x.data, axis=-1, keepdims=True) + x.data.dtype.type(eps)
    inv = 1.0 / np.sqrt(ms)
    xn = x.data * inv
    out = gain.data * xn

    def bw(g):
        gg = g * gain.data
        dot = np.mean(gg * x.data, axis=-1, keepdims=True)
        x.accumulate(inv * (gg - x.data * (dot / ms)))
        gain.accumulate((g * xn).reshape(-1, d).sum(axis=0))

    return make_op(out, (x, gain), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Classic LayerNorm, kept as the ablation alternative to rms_norm."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm: gain/bias shape mismatch")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True) + x.data.dtype.type(eps)
    inv = 1.0 / np.sqrt(var)
    xn = xc * inv
    out = gain.data * xn + bias.data

    def bw(g):
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xn).mean(axis=-1, keepdims=True)
        x.accumulate(inv * (gg - m1 - xn * m2))
        gain.accumulate((g * xn).reshape(-1, d).sum(axis=0))
        bias.accumulate(g.reshape(-1, d).sum(axis=0))

    return make_op(out, (x, gain, bias), bw)


def swiglu_ffn(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """(silu(x @ w_gate) * (x @ w_up)) @ w_down"""
    if x.data.shape[-1] != w_gate.data.shape[0]:
        raise ShapeError(f"swiglu_ffn: input dim {x.data.shape[-1]} vs {w_gate.data.shape[0]}")
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down)


def gelu_ffn(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    return matmul(gelu(matmul(x, w1)), w2)


def _rope_tables(positions: np.ndarray, d_head: int, base: float, dtype):
    k = np.arange(d_head // 2)
    freqs = base ** (-2.0 * k / d_head)
    ang = positions[:, None] * freqs[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope_rotate(x: Tensor, positions, base: float = 100.0) -> Tensor:
    """Pairwise rotation of (2k, 2k+1) feature pairs by angle pos * base^(-2k/d).

    Accepts [..., seq, heads, d_head]; rotation preserves per-position norms.
    """
    d_head = x.data.shape[-1]
    if d_head % 2 != 0:
        raise ConfigError(f"rope_rotate: odd head dim {d_head}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape[0] != x.data.shape[-3]:
        raise ShapeError("rope_rotate: positions length != seq length")
    cos, sin = _rope_tables(pos, d_head, base, x.data.dtype)
    cos = cos[:, None, :]  # [seq, 1, d/2] broadcasting over heads
    sin = sin[:, None, :]
    x1 = x.data[..., 0::2]
    x2 = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def bw(g):
        g1 = g[..., 0::2]
        g2 = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = -g1 * sin + g2 * cos
        x.accumulate(gx)

    return make_op(out, (x,), bw)


class AttentionMask:
    """Key-visibility structure for attention.

    kinds:
      none              full bidirectional attention
      scale_causal      block b attends to blocks <= b; an optional prefix of
                        ``prefix`` leading keys is visible to every query and
                        attends only within itself
      frame_edit        query frame f attends to key column 0 (the null
                        context) when flag[f] == 0 and to columns 1.. when
                        flag[f] == 1
    """

    def __init__(self, kind: str = "none", blocks: list[tuple[int, int]] | None = None,
                 prefix: int = 0, flags: np.ndarray | None = None):
        if kind not in ("none", "scale_causal", "frame_edit"):
            raise ConfigError(f"unknown mask kind: {kind}")
        self.kind = kind
        self.blocks = blocks or []
        self.prefix = prefix
        self.flags = None if flags is None else np.asarray(flags).astype(bool)
        if kind == "scale_causal":
            self._check_blocks()

    def _check_blocks(self):
        last = 0
        for lo, hi in self.blocks:
            if lo != last or hi <= lo:
                raise ConfigError(f"mask blocks must be ordered, disjoint and covering; got {self.blocks}")
            last = hi

    @classmethod
    def from_intervals(cls, intervals: list[tuple[int, int]], frames: int) -> "AttentionMask":
        flags = np.zeros(frames, dtype=bool)
        for a, b in intervals:
            if a >= b or a < 0 or b > frames:
                raise BoundsError(f"edit interval {a}:{b} outside [0, {frames}]")
            flags[a:b] = True
        return cls(kind="frame_edit", flags=flags)

    def allow_matrix(self, n_q: int, n_k: int) -> np.ndarray:
        if self.kind == "none":
            return np.ones((n_q, n_k), dtype=bool)
        if self.kind == "scale_causal":
            p = self.prefix
            total = p + self.blocks[-1][1]
            if n_q != total or n_k != total:
                raise ShapeError(f"mask covers {total} positions, attention has {n_q}x{n_k}")
            allow = np.zeros((n_q, n_k), dtype=bool)
            if p:
                allow[:p, :p] = True
                allow[p:, :p] = True
            for lo, hi in self.blocks:
                allow[p + lo:p + hi, p:p + hi] = True
            return allow
        # frame_edit
        if n_q != self.flags.shape[0]:
            raise ShapeError(f"edit mask length {self.flags.shape[0]} != {n_q} queries")
        allow = np.zeros((n_q, n_k), dtype=bool)
        allow[~self.flags, 0] = True
        allow[self.flags, 1:] = True
        return allow


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[..., S, d] -> [..., heads, S, d/heads]"""
    from .tensor import reshape, transpose

    d = x.data.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"heads={heads} does not divide model dim {d}")
    shp = x.data.shape[:-1] + (heads, d // heads)
    y = reshape(x, shp)
    axes = list(range(y.data.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return transpose(y, axes)


def merge_heads(x: Tensor) -> Tensor:
    """[..., heads, S, d_head] -> [..., S, heads*d_head]"""
    from .tensor import reshape, transpose

    axes = list(range(x.data.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    y = transpose(x, axes)
    shp = y.data.shape[:-2] + (y.data.shape[-2] * y.data.shape[-1],)
    return reshape(y, shp)


def attention(q: Tensor, k: Tensor, v: Tensor, mask: AttentionMask | np.ndarray | None = None,
              heads: int = 1, rope_positions_q=None, rope_positions_k=None,
              rope_base: float = 100.0) -> Tensor:
    """Scaled dot-product multi-head attention over [..., S, d] inputs.

    ``mask`` may be an AttentionMask or a boolean allow matrix; it can carry
    extra leading batch axes. Rotary embedding is applied to q/k when the
    corresponding position list is given.
    """
    from .tensor import reshape, transpose

    d = q.data.shape[-1]
    d_head = d // heads
    qh = split_heads(q, heads)
    kh = split_heads(k, heads)
    vh = split_heads(v, heads)
    if rope_positions_q is not None:
        qh = _rope_heads(qh, rope_positions_q, rope_base)
    if rope_positions_k is not None:
        kh = _rope_heads(kh, rope_positions_k, rope_base)
    kt_axes = list(range(kh.data.ndim))
    kt_axes[-1], kt_axes[-2] = kt_axes[-2], kt_axes[-1]
    scores = matmul(qh, transpose(kh, kt_axes)) * (1.0 / np.sqrt(d_head))

    bias = None
    if mask is not None:
        allow = mask.allow_matrix(q.data.shape[-2], k.data.shape[-2]) if isinstance(mask, AttentionMask) else np.asarray(mask, dtype=bool)
        if not allow.any(axis=-1).all():
            raise ConfigError("attention: a query row has zero permitted keys")
        bias = np.where(allow, np.float32(0.0), NEG_INF)
        if bias.ndim == 2:
            pass  # broadcasts over batch and heads
        else:  # [..., Sq, Sk] batched: add a heads axis
            bias = np.expand_dims(bias, -3)

    from .tensor import softmax as _softmax

    w = _softmax(scores, bias=bias)
    if CAPTURE_ATTENTION:
        LAST_ATTENTION.append(w.data.copy())
    out = matmul(w, vh)
    return merge_heads(out)


def _rope_heads(xh: Tensor, positions, base: float) -> Tensor:
    """Apply rope_rotate to a [..., heads, S, d_head] tensor."""
    from .tensor import transpose

    axes = list(range(xh.data.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    y = transpose(xh, axes)  # [..., S, heads, d_head]
    y = rope_rotate(y, positions, base)
    return transpose(y, axes)


def long_skip_fuse(shallow: Tensor, deep: Tensor, w: Tensor) -> Tensor:
    """Project concat(shallow, deep) back to model dim.

    With w initialized to [0 | I] the fusion returns ``deep`` unchanged.
    """
    if shallow.data.shape != deep.data.shape:
        raise ShapeError(f"long_skip_fuse: {shallow.data.shape} vs {deep.data.shape}")
    d = deep.data.shape[-1]
    if w.data.shape != (2 * d, d):
        raise ShapeError(f"long_skip_fuse: projection must be {(2 * d, d)}, got {w.data.shape}")
    return matmul(concat([shallow, deep], axis=-1), w)


def skip_init(d: int) -> np.ndarray:
    w = np.zeros((2 * d, d), dtype=np.float32)
    w[d:, :] = np.eye(d, dtype=np.float32)
    return w


def skip_pairs(layers: int) -> dict[int, int]:
    """Mirror pairing: late layer j fuses the output of early layer layers-1-j."""
    return {j: layers - 1 - j for j in range((layers + 1) // 2, layers)}
