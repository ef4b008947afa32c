"""Scale-wise autoregressive model over multi-scale token sets.

Teacher forcing builds the input sequence from ground-truth scales: block 1
carries a start embedding pooled from the text, block n>1 carries the
cumulative dequantized embedding of scales < n downsampled to s_n rows.
Text embeddings are prepended as an attendable prefix and a scale-wise
causal mask keeps block n blind to blocks > n. Generation samples the N
scales in N forward passes.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import blocks as B
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash
from .errors import ConfigError, DataError, TrainingError
from .optim import AdamW, lr_at_epoch
from .params import ParamStore
from .quantizer import Codebook, ScaleSchedule, TokenSet, upsample, downsample
from .text import TextContext


def _init(rng, *shape, std=0.02):
    return rng.normal(0.0, std, size=shape).astype(np.float32)


class SarModel:
    def __init__(self, cfg: RunConfig, seed: int = 0, tokenizer_hash: str = ""):
        self.cfg = cfg
        self.schedule = ScaleSchedule(cfg.schedule)
        self.tokenizer_hash = tokenizer_hash
        self.store = ParamStore()
        self.last_forward_passes = 0
        self._build(np.random.default_rng(np.random.SeedSequence([seed, 11])))
        # position bookkeeping over the flat token axis
        scales = self.schedule.scales
        self._block_of = np.concatenate([np.full(s, n) for n, s in enumerate(scales)])
        self._within = np.concatenate([np.arange(s) for s in scales])
        self._starts = np.cumsum([0] + list(scales))

    def _build(self, rng):
        cfg = self.cfg
        d = cfg.sar_dim
        new = self.store.create
        new("sar.in_proj", _init(rng, cfg.model_dim, d))
        new("sar.text_proj", _init(rng, cfg.d_text, d))
        new("sar.null_prefix", _init(rng, d))
        new("sar.sos_proj", _init(rng, cfg.d_text, d))
        new("sar.null_sos", _init(rng, d))
        new("sar.scale_emb", _init(rng, self.schedule.n_scales, d))
        new("sar.pos_emb", _init(rng, self.schedule.latent_tokens, d))
        h = cfg.ffn_dim
        for i in range(cfg.sar_layers):
            self._norm_params(rng, f"sar.b{i}.attn_norm")
            for w in ("wq", "wk", "wv", "wo"):
                new(f"sar.b{i}.attn.{w}", _init(rng, d, d))
            self._norm_params(rng, f"sar.b{i}.ffn_norm")
            if cfg.activation == "swiglu":
                new(f"sar.b{i}.ffn.wg", _init(rng, d, h))
                new(f"sar.b{i}.ffn.wu", _init(rng, d, h))
                new(f"sar.b{i}.ffn.wd", _init(rng, h, d))
            else:
                new(f"sar.b{i}.ffn.w1", _init(rng, d, h))
                new(f"sar.b{i}.ffn.w2", _init(rng, h, d))
        self._norm_params(rng, "sar.final_norm")
        new("sar.head", _init(rng, d, cfg.codebook_size))

    def _norm_params(self, rng, name):
        self.store.create(name + ".g", np.ones(self.cfg.sar_dim, dtype=np.float32))
        if self.cfg.normalization == "layer":
            self.store.create(name + ".b", np.zeros(self.cfg.sar_dim, dtype=np.float32))

    def _norm(self, name, x):
        if self.cfg.normalization == "rms":
            return B.rms_norm(x, self.store[name + ".g"])
        return B.layer_norm(x, self.store[name + ".g"], self.store[name + ".b"])

    # --- inputs -------------------------------------------------------------

    def _token_features(self, token_sets: list[TokenSet], book: Codebook, n_blocks: int
                        ) -> np.ndarray:
        """[B, sum(s_1..s_n_blocks), model_dim]; block 1 rows stay zero."""
        scales = self.schedule.scales[:n_blocks]
        Tn = self.schedule.latent_tokens
        total = int(sum(scales))
        out = np.zeros((len(token_sets), total, self.cfg.model_dim), dtype=np.float32)
        for b, ts in enumerate(token_sets):
            cum = np.zeros((Tn, self.cfg.model_dim), dtype=np.float32)
            for n in range(1, n_blocks):
                cum = cum + upsample(book.entries[ts.tokens[n - 1]], Tn)
                lo, hi = self._starts[n], self._starts[n + 1]
                out[b, lo:hi] = downsample(cum, scales[n])
        return out

    def _pad_texts(self, texts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d_text = self.cfg.d_text
        lens = np.array([0 if t is None or t.is_empty else t.tokens for t in texts])
        W = max(1, int(lens.max(initial=0)))
        emb = np.zeros((len(texts), W, d_text), dtype=np.float32)
        for b, t in enumerate(texts):
            if lens[b]:
                emb[b, :lens[b]] = t.embeddings
        return emb, lens, lens == 0

    def _forward_blocks(self, token_sets, texts, book, n_blocks) -> T.Tensor:
        """Logits [B, sum(s_1..s_n_blocks), V] with the scale-causal mask."""
        cfg, s = self.cfg, self.store
        Bn = len(token_sets)
        scales = self.schedule.scales[:n_blocks]
        total = int(sum(scales))
        feats = self._token_features(token_sets, book, n_blocks)
        x = T.matmul(T.Tensor(feats), s["sar.in_proj"])
        # [sos] rows at block 1, derived from mean-pooled text
        emb, lens, empty = self._pad_texts(texts)
        pooled = np.zeros((Bn, 1, cfg.d_text), dtype=np.float32)
        for b in range(Bn):
            if lens[b]:
                pooled[b, 0] = emb[b, :lens[b]].mean(axis=0)
        sos = T.matmul(T.Tensor(pooled), s["sar.sos_proj"])
        sel = np.zeros((Bn, 1, 1), dtype=np.float32)
        sel[empty, 0, 0] = 1.0
        sos = T.add(T.mul(sos, T.Tensor(1.0 - sel)), T.mul(s["sar.null_sos"], T.Tensor(sel)))
        block1 = np.zeros((total, 1), dtype=np.float32)
        block1[:scales[0], 0] = 1.0
        x = T.add(x, T.matmul(T.Tensor(block1), sos))
        x = T.add(x, T.gather_rows(s["sar.scale_emb"], self._block_of[:total]))
        x = T.add(x, T.gather_rows(s["sar.pos_emb"], self._within[:total]))
        # text prefix (null token when empty)
        proj = T.matmul(T.Tensor(emb), s["sar.text_proj"])
        selp = np.zeros((Bn, emb.shape[1], 1), dtype=np.float32)
        selp[empty, 0, 0] = 1.0
        prefix = T.add(T.mul(proj, T.Tensor(1.0 - selp)), T.mul(s["sar.null_prefix"], T.Tensor(selp)))
        P = emb.shape[1]
        eff = np.where(empty, 1, lens)
        seq = T.concat([prefix, x], axis=1)
        S = P + total
        blocks = [(int(self._starts[n]), int(self._starts[n + 1])) for n in range(n_blocks)]
        base = B.AttentionMask("scale_causal", blocks=blocks, prefix=P).allow_matrix(S, S)
        allow = np.broadcast_to(base, (Bn, S, S)).copy()
        pad_cols = np.arange(P)[None, :] >= eff[:, None]
        allow[:, :, :P] &= ~pad_cols[:, None, :]
        pos = np.arange(S)

        def block(i, x):
            x = self._attn_block(i, x, allow, pos)
            return self._ffn_block(i, x)

        h = seq
        for i in range(cfg.sar_layers):
            h = block(i, h)
        h = self._norm("sar.final_norm", h)
        h = T.narrow(h, 1, P, total)
        return T.matmul(h, s["sar.head"])

    def _attn_block(self, i, x, allow, pos):
        s = self.store
        p = f"sar.b{i}.attn"
        h = self._norm(p + "_norm", x)
        out = B.attention(T.matmul(h, s[p + ".wq"]), T.matmul(h, s[p + ".wk"]),
                          T.matmul(h, s[p + ".wv"]), mask=allow, heads=self.cfg.sar_heads,
                          rope_positions_q=pos, rope_positions_k=pos,
                          rope_base=self.cfg.rope_base)
        return x + T.matmul(out, s[p + ".wo"])

    def _ffn_block(self, i, x):
        s = self.store
        p = f"sar.b{i}"
        h = self._norm(p + ".ffn_norm", x)
        if self.cfg.activation == "swiglu":
            y = B.swiglu_ffn(h, s[p + ".ffn.wg"], s[p + ".ffn.wu"], s[p + ".ffn.wd"])
        else:
            y = B.gelu_ffn(h, s[p + ".ffn.w1"], s[p + ".ffn.w2"])
        return x + y

    # --- public ops -----------------------------------------------------------

    def forward(self, token_sets: list[TokenSet], texts, book: Codebook) -> T.Tensor:
        for ts in token_sets:
            if ts.schedule.scales != self.schedule.scales:
                raise ConfigError("token set schedule does not match the model schedule")
        return self._forward_blocks(token_sets, texts, book, self.schedule.n_scales)

    def loss(self, logits: T.Tensor, token_sets: list[TokenSet]) -> tuple[T.Tensor, float]:
        """Mean NLL and perplexity = exp(mean per-token NLL)."""
        targets = np.stack([ts.flat() for ts in token_sets])
        if targets.max() >= self.cfg.codebook_size:
            raise DataError(f"token index {targets.max()} >= V={self.cfg.codebook_size}")
        nll = T.cross_entropy(logits, targets, reduce="mean")
        return nll, float(np.exp(float(nll.data)))

    def generate(self, text: TextContext | None, book: Codebook, temperature: float = 1.0,
                 top_k: int | None = None, seed: int = 0) -> TokenSet:
        """Sample one TokenSet scale by scale (exactly N forward passes)."""
        cfg = self.cfg
        if top_k is None:
            top_k = cfg.codebook_size
        if top_k == 0:
            raise ConfigError("top_k must be >= 1 (or None for the full vocabulary)")
        top_k = min(top_k, cfg.codebook_size)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
        sampled: list[np.ndarray] = []
        self.last_forward_passes = 0
        for n in range(1, self.schedule.n_scales + 1):
            partial = TokenSet(
                tokens=sampled + [np.zeros(s, dtype=np.int32)
                                  for s in self.schedule.scales[len(sampled):]],
                schedule=self.schedule)
            with T.no_grad():
                logits = self._forward_blocks([partial], [text], book, n)
            self.last_forward_passes += 1
            lo, hi = self._starts[n - 1], self._starts[n]
            block_logits = logits.data[0, lo:hi].astype(np.float64)
            sampled.append(_sample_block(block_logits, temperature, top_k, rng))
        return TokenSet(tokens=sampled, schedule=self.schedule)

    # --- persistence ------------------------------------------------------------

    def save(self, path, extra: dict | None = None):
        manifest = {"kind": "sar", "config": self.cfg.to_dict(),
                    "config_hash": config_hash(self.cfg),
                    "tokenizer_hash": self.tokenizer_hash}
        manifest.update(extra or {})
        save_checkpoint(path, self.store.state_arrays(), extra=manifest)

    @classmethod
    def load(cls, path) -> "SarModel":
        arrays, manifest = load_checkpoint(path)
        if manifest.get("kind") != "sar":
            raise ConfigError(f"{path} is not a SAR checkpoint")
        cfg_d = dict(manifest["config"])
        cfg_d["schedule"] = tuple(cfg_d["schedule"])
        cfg_d["g_sweep"] = tuple(cfg_d["g_sweep"])
        cfg = RunConfig(**cfg_d)
        model = cls(cfg, seed=cfg.seed, tokenizer_hash=manifest.get("tokenizer_hash", ""))
        model.store.load_arrays(arrays)
        return model


def _sample_block(logits: np.ndarray, temperature: float, top_k: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Independent temperature/top-k sampling for every row of one block."""
    if temperature <= 0.0 or top_k == 1:
        return np.argmax(logits, axis=-1).astype(np.int32)
    x = logits / temperature
    if top_k < x.shape[-1]:
        kth = np.partition(x, -top_k, axis=-1)[:, -top_k][:, None]
        x = np.where(x < kth, -np.inf, x)
    x = x - x.max(axis=-1, keepdims=True)
    p = np.exp(x)
    p /= p.sum(axis=-1, keepdims=True)
    cdf = np.cumsum(p, axis=-1)
    u = rng.random((x.shape[0], 1))
    return (u < cdf).argmax(axis=-1).astype(np.int32)


def train_sar(token_sets: list[TokenSet], texts, val_sets, val_texts, cfg: RunConfig,
              book: Codebook, seed: int, tokenizer_hash: str = "", out_dir=None,
              epochs: int | None = None, max_steps: int | None = None
              ) -> tuple[SarModel, list[dict]]:
    """Teacher-forced training over a pre-tokenized corpus."""
    model = SarModel(cfg, seed=seed, tokenizer_hash=tokenizer_hash)
    opt = AdamW(model.store, lr=cfg.sar_lr, weight_decay=cfg.weight_decay, clip=cfg.clip)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    n_epochs = epochs if epochs is not None else cfg.sar_epochs
    history: list[dict] = []
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    best_val = float("inf")
    step = 0
    done = False
    idx = np.arange(len(token_sets))
    for epoch in range(1, n_epochs + 1):
        opt.lr = lr_at_epoch(cfg.sar_lr, epoch, n_epochs, cfg.lr_drop_factor)
        rng.shuffle(idx)
        tot_nll, n_rec = 0.0, 0
        for lo in range(0, len(idx), cfg.batch_size):
            batch = idx[lo:lo + cfg.batch_size]
            bsets = [token_sets[i] for i in batch]
            btexts = [texts[i] for i in batch]
            if cfg.condition_drop > 0:
                btexts = [None if rng.random() < cfg.condition_drop else t for t in btexts]
            logits = model.forward(bsets, btexts, book)
            nll, _ = model.loss(logits, bsets)
            if not np.isfinite(float(nll.data)):
                raise TrainingError(f"non-finite NLL at epoch {epoch} step {step}")
            T.backward(nll)
            opt.step()
            tot_nll += float(nll.data) * len(batch)
            n_rec += len(batch)
            step += 1
            if max_steps is not None and step >= max_steps:
                done = True
                break
        train_nll = tot_nll / max(n_rec, 1)
        val_nll, val_ppl = eval_sar(model, val_sets, val_texts, book, cfg.batch_size)
        row = {"epoch": epoch, "step": step, "train_nll": train_nll,
               "train_ppl": float(np.exp(train_nll)), "val_nll": val_nll,
               "val_ppl": val_ppl, "lr": opt.lr}
        history.append(row)
        if out and np.isfinite(val_nll) and val_nll < best_val:
            best_val = val_nll
            model.save(out / "sar_best.ckpt", extra={"epoch": epoch, "seed": seed})
        if done:
            break
    if out:
        model.save(out / "sar_final.ckpt", extra={"epoch": n_epochs, "seed": seed})
        with open(out / "sar_log.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["epoch", "step", "train_nll", "train_ppl",
                                              "val_nll", "val_ppl", "lr"])
            w.writeheader()
            w.writerows(history)
    return model, history


def eval_sar(model: SarModel, token_sets, texts, book: Codebook, batch_size: int
             ) -> tuple[float, float]:
    if not token_sets:
        return float("nan"), float("nan")
    tot, n = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(token_sets), batch_size):
            bsets = token_sets[lo:lo + batch_size]
            btexts = texts[lo:lo + batch_size]
            logits = model.forward(bsets, btexts, book)
            nll, _ = model.loss(logits, bsets)
            tot += float(nll.data) * len(bsets)
            n += len(bsets)
    mean = tot / n
    return mean, float(np.exp(mean))
