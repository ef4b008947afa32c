"""Transformer tokenizer and detokenizer with optional text guidance.

Tokenizer (default in-context): the sequence [text; latent; motion] runs
through pre-norm self-attention blocks and only the latent-token outputs
are kept. Detokenizer (default cross-attention): learnable per-frame mask
tokens self-attend, cross-attend to the dequantized embeddings, then to
the text context, and a linear head regresses motion channels.

Text absence is realized through a learned null-context token so the
graph shape is identical with and without captions; per-frame edit masks
route individual frames' text cross-attention to that same null token.
"""

from __future__ import annotations

import numpy as np

from . import blocks as B
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash
from .errors import BoundsError, ConfigError, ShapeError
from .params import ParamStore
from .quantizer import Codebook
from .text import TextContext


def _init(rng, *shape, std=0.02):
    return rng.normal(0.0, std, size=shape).astype(np.float32)


class LgTokenizer:
    def __init__(self, cfg: RunConfig, seed: int = 0):
        self.cfg = cfg
        self.store = ParamStore()
        self.book = Codebook(cfg.codebook_size, cfg.model_dim, seed=seed,
                             decay=cfg.codebook_decay, revival_steps=cfg.revival_steps)
        self._build(np.random.default_rng(np.random.SeedSequence([seed, 3])))

    # --- parameters --------------------------------------------------------

    @property
    def text_in_tokenizer(self) -> bool:
        return self.cfg.guidance_location in ("tokenizer_only", "both")

    @property
    def text_in_detokenizer(self) -> bool:
        return self.cfg.guidance_location in ("detokenizer_only", "both")

    def _build(self, rng):
        cfg = self.cfg
        d = cfg.model_dim
        new = self.store.create
        if self.text_in_tokenizer or self.text_in_detokenizer:
            new("null_ctx", _init(rng, d))
        new("tok.motion_proj", _init(rng, cfg.channels, d))
        new("tok.latent", _init(rng, cfg.latent_tokens, d))
        if self.text_in_tokenizer:
            new("tok.text_proj", _init(rng, cfg.d_text, d))
        if cfg.tokenizer_interaction == "in_context":
            new("tok.seg_latent", _init(rng, d))
            new("tok.seg_motion", _init(rng, d))
            if self.text_in_tokenizer:
                new("tok.seg_text", _init(rng, d))
        for i in range(cfg.layers):
            crosses = []
            if cfg.tokenizer_interaction == "cross_attention":
                crosses.append("xmotion")
                if self.text_in_tokenizer:
                    crosses.append("xtext")
            self._build_block(rng, f"tok.b{i}", crosses)
            if cfg.skip_connections and i in B.skip_pairs(cfg.layers):
                new(f"tok.b{i}.skip", B.skip_init(d))
        self._build_norm(rng, "tok.final_norm")

        rows = 1 if cfg.shared_mask_token else cfg.max_frames
        new("det.mask_tokens", _init(rng, rows, d))
        if self.text_in_detokenizer:
            new("det.text_proj", _init(rng, cfg.d_text, d))
        if cfg.detokenizer_interaction == "in_context":
            new("det.seg_z", _init(rng, d))
            new("det.seg_mask", _init(rng, d))
            if self.text_in_detokenizer:
                new("det.seg_text", _init(rng, d))
        for i in range(cfg.layers):
            crosses = []
            if cfg.detokenizer_interaction == "cross_attention":
                crosses.append("xz")
                if self.text_in_detokenizer:
                    crosses.append("xtext")
            self._build_block(rng, f"det.b{i}", crosses)
            if cfg.skip_connections and i in B.skip_pairs(cfg.layers):
                new(f"det.b{i}.skip", B.skip_init(d))
        self._build_norm(rng, "det.final_norm")
        new("det.head.w", _init(rng, d, cfg.channels))
        new("det.head.b", np.zeros(cfg.channels, dtype=np.float32))

    def _build_norm(self, rng, name):
        self.store.create(name + ".g", np.ones(self.cfg.model_dim, dtype=np.float32))
        if self.cfg.normalization == "layer":
            self.store.create(name + ".b", np.zeros(self.cfg.model_dim, dtype=np.float32))

    def _build_attn(self, rng, prefix):
        d = self.cfg.model_dim
        for w in ("wq", "wk", "wv", "wo"):
            self.store.create(f"{prefix}.{w}", _init(rng, d, d))

    def _build_block(self, rng, prefix, crosses):
        d, h = self.cfg.model_dim, self.cfg.ffn_dim
        self._build_norm(rng, f"{prefix}.attn_norm")
        self._build_attn(rng, f"{prefix}.attn")
        for c in crosses:
            self._build_norm(rng, f"{prefix}.{c}_norm")
            self._build_attn(rng, f"{prefix}.{c}")
        self._build_norm(rng, f"{prefix}.ffn_norm")
        if self.cfg.activation == "swiglu":
            self.store.create(f"{prefix}.ffn.wg", _init(rng, d, h))
            self.store.create(f"{prefix}.ffn.wu", _init(rng, d, h))
            self.store.create(f"{prefix}.ffn.wd", _init(rng, h, d))
        else:
            self.store.create(f"{prefix}.ffn.w1", _init(rng, d, h))
            self.store.create(f"{prefix}.ffn.w2", _init(rng, h, d))

    # --- sublayers ----------------------------------------------------------

    def _norm(self, name, x):
        if self.cfg.normalization == "rms":
            return B.rms_norm(x, self.store[name + ".g"])
        return B.layer_norm(x, self.store[name + ".g"], self.store[name + ".b"])

    def _attn(self, prefix, x, kv=None, mask=None, pos_q=None, pos_k=None):
        s = self.store
        h = self._norm(prefix + "_norm", x)
        ctx = h if kv is None else kv
        out = B.attention(
            T.matmul(h, s[prefix + ".wq"]), T.matmul(ctx, s[prefix + ".wk"]),
            T.matmul(ctx, s[prefix + ".wv"]), mask=mask, heads=self.cfg.heads,
            rope_positions_q=pos_q, rope_positions_k=pos_k, rope_base=self.cfg.rope_base)
        return x + T.matmul(out, s[prefix + ".wo"])

    def _ffn(self, prefix, x):
        s = self.store
        h = self._norm(prefix + ".ffn_norm", x)
        if self.cfg.activation == "swiglu":
            y = B.swiglu_ffn(h, s[prefix + ".ffn.wg"], s[prefix + ".ffn.wu"], s[prefix + ".ffn.wd"])
        else:
            y = B.gelu_ffn(h, s[prefix + ".ffn.w1"], s[prefix + ".ffn.w2"])
        return x + y

    def _stack(self, side, x, run_block):
        """Run the block stack with mirror-pair long skips."""
        pairs = B.skip_pairs(self.cfg.layers) if self.cfg.skip_connections else {}
        stash = {}
        for i in range(self.cfg.layers):
            if i in pairs:
                x = B.long_skip_fuse(stash[pairs[i]], x, self.store[f"{side}.b{i}.skip"])
            x = run_block(i, x)
            if i in pairs.values():
                stash[i] = x
        return x

    # --- text plumbing ------------------------------------------------------

    def _pad_texts(self, texts: list[TextContext]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pad embeddings to a common width; returns (emb [B,W,dt], lengths, empties)."""
        d_text = self.cfg.d_text
        lens = np.array([0 if t is None or t.is_empty else t.tokens for t in texts])
        W = max(1, int(lens.max(initial=0)))
        emb = np.zeros((len(texts), W, d_text), dtype=np.float32)
        for b, t in enumerate(texts):
            if lens[b]:
                if t.embeddings.shape[1] != d_text:
                    raise ShapeError(f"text dim {t.embeddings.shape[1]} != configured {d_text}")
                emb[b, :lens[b]] = t.embeddings
        return emb, lens, lens == 0

    def _text_segment(self, texts, proj_name) -> tuple[T.Tensor, np.ndarray]:
        """Text rows in model space; empty contexts get the null token at
        position 0. Returns (segment [B, W, d], effective lengths)."""
        emb, lens, empty = self._pad_texts(texts)
        proj = T.matmul(T.Tensor(emb), self.store[proj_name])
        sel = np.zeros((emb.shape[0], emb.shape[1], 1), dtype=np.float32)
        sel[empty, 0, 0] = 1.0
        seg = T.add(T.mul(proj, T.Tensor(1.0 - sel)), T.mul(self.store["null_ctx"], T.Tensor(sel)))
        eff = np.where(empty, 1, lens)
        return seg, eff

    # --- tokenizer ----------------------------------------------------------

    def tokenize(self, motion: np.ndarray, texts: list[TextContext] | None) -> T.Tensor:
        """motion [B, F, C] (normalized feature space) -> latents [B, T, d]."""
        cfg = self.cfg
        if motion.ndim != 3:
            raise ShapeError(f"motion must be [B, F, C], got {motion.shape}")
        Bn, F, C = motion.shape
        if F == 0:
            raise ShapeError("empty motion")
        if F > cfg.max_frames:
            raise BoundsError(f"F={F} exceeds max_frames={cfg.max_frames}")
        if C != cfg.channels:
            raise ShapeError(f"motion has {C} channels, config says {cfg.channels}")
        if texts is None or cfg.text_drop >= 1.0:
            # drop probability 1: language never enters the graph, inference included
            texts = [None] * Bn
        s = self.store
        m_seg = T.matmul(T.Tensor(motion), s["tok.motion_proj"])
        Tn, d = cfg.latent_tokens, cfg.model_dim
        z_seg = T.add(T.Tensor(np.zeros((Bn, Tn, d), dtype=np.float32)), s["tok.latent"])
        if cfg.tokenizer_interaction == "in_context":
            return self._tokenize_in_context(m_seg, z_seg, texts, Bn, F)
        return self._tokenize_cross(m_seg, z_seg, texts, Bn, F)

    def _tokenize_in_context(self, m_seg, z_seg, texts, Bn, F):
        cfg, s = self.cfg, self.store
        Tn = cfg.latent_tokens
        m_seg = T.add(m_seg, s["tok.seg_motion"])
        z_seg = T.add(z_seg, s["tok.seg_latent"])
        segs, positions = [], []
        allow_cols = None
        W = 0
        if self.text_in_tokenizer:
            t_seg, eff = self._text_segment(texts, "tok.text_proj")
            t_seg = T.add(t_seg, s["tok.seg_text"])
            W = t_seg.data.shape[1]
            segs.append(t_seg)
            positions.append(np.arange(W))
            allow_cols = np.arange(W)[None, :] < eff[:, None]  # [B, W]
        segs += [z_seg, m_seg]
        positions += [np.arange(Tn), np.arange(F)]
        seq = T.concat(segs, axis=1) if len(segs) > 1 else segs[0]
        pos = np.concatenate(positions)
        S = seq.data.shape[1]
        mask = None
        if allow_cols is not None and not allow_cols.all():
            allow = np.ones((Bn, S, S), dtype=bool)
            allow[:, :, :W] = allow_cols[:, None, :]
            mask = allow

        def block(i, x):
            x = self._attn(f"tok.b{i}.attn", x, mask=mask, pos_q=pos, pos_k=pos)
            return self._ffn(f"tok.b{i}", x)

        out = self._stack("tok", seq, block)
        out = self._norm("tok.final_norm", out)
        return T.narrow(out, 1, W, Tn)

    def _tokenize_cross(self, m_seg, z_seg, texts, Bn, F):
        cfg = self.cfg
        Tn = cfg.latent_tokens
        pos_z = np.arange(Tn)
        pos_m = np.arange(F)
        text_ctx = None
        if self.text_in_tokenizer:
            t_seg, eff = self._text_segment(texts, "tok.text_proj")
            W = t_seg.data.shape[1]
            allow = np.broadcast_to(np.arange(W)[None, None, :] < eff[:, None, None],
                                    (Bn, Tn, W)).copy()
            text_ctx = (t_seg, allow, np.arange(W))

        cross_pos = (lambda p: p) if cfg.rope_in_cross else (lambda p: None)

        def block(i, x):
            x = self._attn(f"tok.b{i}.attn", x, pos_q=pos_z, pos_k=pos_z)
            x = self._attn(f"tok.b{i}.xmotion", x, kv=m_seg,
                           pos_q=cross_pos(pos_z), pos_k=cross_pos(pos_m))
            if text_ctx is not None:
                t_seg, allow, pos_t = text_ctx
                x = self._attn(f"tok.b{i}.xtext", x, kv=t_seg, mask=allow,
                               pos_q=cross_pos(pos_z), pos_k=cross_pos(pos_t))
            return self._ffn(f"tok.b{i}", x)

        out = self._stack("tok", z_seg, block)
        return self._norm("tok.final_norm", out)

    # --- detokenizer ----------------------------------------------------------

    def _detok_text_context(self, texts, frames: int, edit_mask: np.ndarray | None
                            ) -> tuple[T.Tensor, np.ndarray]:
        """Context [B, 1+W, d] with the null token in column 0, plus the
        per-frame allow matrix implementing the edit-mask routing."""
        s = self.store
        emb, lens, empty = self._pad_texts(texts)
        Bn, W, _ = emb.shape
        proj = T.matmul(T.Tensor(emb), s["det.text_proj"])
        null_row = T.add(T.Tensor(np.zeros((Bn, 1, self.cfg.model_dim), dtype=np.float32)),
                         s["null_ctx"])
        ctx = T.concat([null_row, proj], axis=1)
        if edit_mask is None:
            flags = np.ones(frames, dtype=bool)
        else:
            flags = np.asarray(edit_mask).astype(bool)
            if flags.shape != (frames,):
                raise ShapeError(f"edit mask length {flags.shape} != frames {frames}")
        allow = np.zeros((Bn, frames, 1 + W), dtype=bool)
        for b in range(Bn):
            use_text = flags & ~empty[b]
            allow[b, ~use_text, 0] = True
            allow[b, use_text, 1:1 + lens[b]] = True
        return ctx, allow

    def detokenize(self, z_hat, texts: list[TextContext] | None, frames: int,
                   edit_mask: np.ndarray | None = None) -> T.Tensor:
        """Dequantized embeddings [B, T, d] -> motion [B, F, C] (normalized space)."""
        cfg, s = self.cfg, self.store
        if frames > cfg.max_frames:
            raise BoundsError(f"F={frames} exceeds max_frames={cfg.max_frames}")
        z = z_hat if isinstance(z_hat, T.Tensor) else T.Tensor(np.asarray(z_hat, dtype=np.float32))
        if z.data.ndim != 3:
            raise ShapeError(f"z_hat must be [B, T, d], got {z.data.shape}")
        Bn = z.data.shape[0]
        if texts is None or cfg.text_drop >= 1.0:
            texts = [None] * Bn
        if edit_mask is not None and not self.text_in_detokenizer:
            raise ConfigError("edit mask given but the detokenizer is text-free")
        base = s["det.mask_tokens"]
        rows = base if cfg.shared_mask_token else T.narrow(base, 0, 0, frames)
        stream = T.add(T.Tensor(np.zeros((Bn, frames, cfg.model_dim), dtype=np.float32)), rows)
        if cfg.detokenizer_interaction == "cross_attention":
            out = self._detokenize_cross(stream, z, texts, frames, edit_mask)
        else:
            out = self._detokenize_in_context(stream, z, texts, frames, edit_mask, Bn)
        out = self._norm("det.final_norm", out)
        return T.add(T.matmul(out, s["det.head.w"]), s["det.head.b"])

    def _detokenize_cross(self, stream, z, texts, frames, edit_mask):
        cfg = self.cfg
        pos_f = np.arange(frames)
        pos_z = np.arange(cfg.latent_tokens)
        text_ctx = None
        if self.text_in_detokenizer:
            text_ctx = self._detok_text_context(texts, frames, edit_mask)
        cross_pos = (lambda p: p) if cfg.rope_in_cross else (lambda p: None)

        def block(i, x):
            x = self._attn(f"det.b{i}.attn", x, pos_q=pos_f, pos_k=pos_f)
            x = self._attn(f"det.b{i}.xz", x, kv=z,
                           pos_q=cross_pos(pos_f), pos_k=cross_pos(pos_z))
            if text_ctx is not None:
                ctx, allow = text_ctx
                x = self._attn(f"det.b{i}.xtext", x, kv=ctx, mask=allow)
            return self._ffn(f"det.b{i}", x)

        return self._stack("det", stream, block)

    def _detokenize_in_context(self, stream, z, texts, frames, edit_mask, Bn):
        # ablation variant: concatenate [text; z; mask tokens] for joint self-attention
        cfg, s = self.cfg, self.store
        Tn = cfg.latent_tokens
        z_seg = T.add(z, s["det.seg_z"])
        stream = T.add(stream, s["det.seg_mask"])
        segs, positions = [], []
        W = 0
        allow = None
        if self.text_in_detokenizer:
            ctx, callow = self._detok_text_context(texts, frames, edit_mask)
            ctx = T.add(ctx, s["det.seg_text"])
            W = ctx.data.shape[1]
            segs.append(ctx)
            positions.append(np.arange(W))
        segs += [z_seg, stream]
        positions += [np.arange(Tn), np.arange(frames)]
        seq = T.concat(segs, axis=1)
        pos = np.concatenate(positions)
        S = seq.data.shape[1]
        if self.text_in_detokenizer:
            allow = np.ones((Bn, S, S), dtype=bool)
            key_ok = np.zeros((Bn, W), dtype=bool)
            key_ok |= callow.any(axis=1)  # columns any frame may use
            allow[:, :, :W] = key_ok[:, None, :]
            # frame rows follow the per-frame routing exactly
            allow[:, W + Tn:, :W] = callow

        def block(i, x):
            x = self._attn(f"det.b{i}.attn", x, mask=allow, pos_q=pos, pos_k=pos)
            return self._ffn(f"det.b{i}", x)

        out = self._stack("det", seq, block)
        return T.narrow(out, 1, W + Tn, frames)

    # --- persistence ----------------------------------------------------------

    def save(self, path, extra: dict | None = None):
        arrays = dict(self.store.state_arrays())
        arrays["quant.entries"] = self.book.entries
        arrays["quant.ema_counts"] = self.book.ema_counts.astype(np.float32)
        arrays["quant.ema_sums"] = self.book.ema_sums.astype(np.float32)
        manifest = {"kind": "tokenizer", "config": self.cfg.to_dict(),
                    "config_hash": config_hash(self.cfg)}
        manifest.update(extra or {})
        save_checkpoint(path, arrays, extra=manifest)

    @classmethod
    def load(cls, path) -> "LgTokenizer":
        arrays, manifest = load_checkpoint(path)
        if manifest.get("kind") != "tokenizer":
            raise ConfigError(f"{path} is not a tokenizer checkpoint")
        cfg_d = dict(manifest["config"])
        cfg_d["schedule"] = tuple(cfg_d["schedule"])
        cfg_d["g_sweep"] = tuple(cfg_d["g_sweep"])
        cfg = RunConfig(**cfg_d)
        model = cls(cfg, seed=cfg.seed)
        model.book.entries = arrays.pop("quant.entries")
        model.book.ema_counts = arrays.pop("quant.ema_counts").astype(np.float64)
        model.book.ema_sums = arrays.pop("quant.ema_sums").astype(np.float64)
        model.store.load_arrays(arrays)
        return model

    def config_hash(self) -> str:
        return config_hash(self.cfg)


def reconstruction_loss(m_hat: T.Tensor, m: np.ndarray, z: T.Tensor | None = None,
                        z_hat: np.ndarray | None = None, beta: float = 0.25) -> T.Tensor:
    """Smooth-L1 reconstruction plus the quantizer commitment term."""
    loss = T.smooth_l1(m_hat, m)
    if z is not None and beta:
        commit = T.mean_(T.square(T.sub(z, T.Tensor(np.asarray(z_hat, dtype=np.float32)))))
        loss = T.add(loss, T.scale(commit, beta))
    return loss
