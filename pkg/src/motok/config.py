"""Run configuration: one flat key=value namespace, presets, config hashing.

Presets expand to documented value sets; `full` carries the paper-scale
architecture (9 layers, 4 heads, 256/1024 dims, batch 128, 200 epochs,
RoPE base 100, 10% text drop). Only `tiny` is exercised by the
acceptance suite.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


@dataclass
class RunConfig:
    preset: str = "tiny"
    seed: int = 0
    deterministic: bool = False
    # corpus
    corpus_size: int = 64
    channels: int = 8
    frames_min: int = 64
    frames_max: int = 64
    d_text: int = 32
    # tokenizer / detokenizer
    layers: int = 2
    heads: int = 2
    model_dim: int = 32
    ffn_dim: int = 128
    latent_tokens: int = 8
    max_frames: int = 196
    rope_base: float = 100.0
    text_drop: float = 0.10
    guidance_location: str = "both"  # none | tokenizer_only | detokenizer_only | both
    tokenizer_interaction: str = "in_context"  # in_context | cross_attention
    detokenizer_interaction: str = "cross_attention"
    normalization: str = "rms"  # rms | layer
    activation: str = "swiglu"  # swiglu | gelu
    skip_connections: bool = True
    shared_mask_token: bool = False
    rope_in_cross: bool = False
    # quantizer
    codebook_size: int = 64
    schedule: tuple[int, ...] = (1, 2, 4, 8)
    codebook_decay: float = 0.99
    commitment: float = 0.25
    revival_steps: int = 256
    shared_codebook: bool = True
    # training
    batch_size: int = 16
    epochs: int = 40
    lr: float = 1e-3
    lr_drop_factor: float = 0.1
    weight_decay: float = 0.0
    clip: float = 0.01
    # SAR
    sar_layers: int = 2
    sar_heads: int = 2
    sar_dim: int = 64
    sar_epochs: int = 40
    sar_lr: float = 1e-3
    temperature: float = 1.0
    top_k: int | None = None  # None resolves to the codebook size
    condition_drop: float = 0.0
    # guidance / evaluation
    guidance_scale: float = 2.0
    g_sweep: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 3.0)
    eval_repeats: int = 20
    # paths
    corpus_dir: str = ""
    tokenizer_ckpt: str = ""
    sar_ckpt: str = ""

    def __post_init__(self):
        if not (0.0 <= self.text_drop <= 1.0):
            raise ConfigError(f"text_drop={self.text_drop} outside [0, 1]")
        if self.guidance_location not in ("none", "tokenizer_only", "detokenizer_only", "both"):
            raise ConfigError(f"bad guidance_location: {self.guidance_location}")
        if self.tokenizer_interaction not in ("in_context", "cross_attention"):
            raise ConfigError(f"bad tokenizer_interaction: {self.tokenizer_interaction}")
        if self.detokenizer_interaction not in ("in_context", "cross_attention"):
            raise ConfigError(f"bad detokenizer_interaction: {self.detokenizer_interaction}")
        if self.normalization not in ("rms", "layer"):
            raise ConfigError(f"bad normalization: {self.normalization}")
        if self.activation not in ("swiglu", "gelu"):
            raise ConfigError(f"bad activation: {self.activation}")
        if self.schedule[-1] != self.latent_tokens:
            raise ConfigError(
                f"schedule ends at {self.schedule[-1]} but latent_tokens={self.latent_tokens}")
        if self.model_dim % self.heads or self.sar_dim % self.sar_heads:
            raise ConfigError("head count must divide model dim")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schedule"] = list(self.schedule)
        d["g_sweep"] = list(self.g_sweep)
        return d


# fields that define cross-stage compatibility; training-loop and path keys
# are deliberately excluded so retraining with more epochs stays compatible
STRUCTURAL_KEYS = (
    "channels", "d_text", "layers", "heads", "model_dim", "ffn_dim",
    "latent_tokens", "max_frames", "rope_base", "guidance_location",
    "tokenizer_interaction", "detokenizer_interaction", "normalization",
    "activation", "skip_connections", "shared_mask_token", "rope_in_cross",
    "codebook_size", "schedule", "shared_codebook",
    "sar_layers", "sar_heads", "sar_dim",
)


def config_hash(cfg: RunConfig) -> str:
    payload = {k: cfg.to_dict()[k] for k in STRUCTURAL_KEYS}
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.blake2b(blob, digest_size=8).hexdigest()


PRESETS: dict[str, dict] = {
    "tiny": {},
    "mini": {
        "layers": 9, "heads": 4, "model_dim": 256, "ffn_dim": 1024,
        "latent_tokens": 25, "schedule": (1, 2, 3, 4, 6, 9, 13, 17, 24, 25),
        "codebook_size": 512, "batch_size": 128, "epochs": 200, "lr": 2e-4,
        "frames_min": 40, "frames_max": 196,
        "sar_layers": 9, "sar_heads": 4, "sar_dim": 256, "sar_epochs": 200, "sar_lr": 2e-4,
    },
    "mid": {
        "layers": 9, "heads": 4, "model_dim": 256, "ffn_dim": 1024,
        "latent_tokens": 36, "schedule": (2, 4, 6, 8, 10, 14, 20, 26, 34, 36),
        "codebook_size": 512, "batch_size": 128, "epochs": 200, "lr": 2e-4,
        "frames_min": 40, "frames_max": 196,
        "sar_layers": 9, "sar_heads": 4, "sar_dim": 256, "sar_epochs": 200, "sar_lr": 2e-4,
    },
    "full": {
        "layers": 9, "heads": 4, "model_dim": 256, "ffn_dim": 1024,
        "latent_tokens": 49, "schedule": (3, 6, 9, 13, 18, 24, 31, 40, 43, 49),
        "codebook_size": 512, "batch_size": 128, "epochs": 200, "lr": 2e-4,
        "frames_min": 40, "frames_max": 196,
        "sar_layers": 9, "sar_heads": 4, "sar_dim": 256, "sar_epochs": 200, "sar_lr": 2e-4,
    },
}

_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    f = _FIELDS[key]
    raw = raw.strip()
    tp = f.type
    if tp == "bool":
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise ConfigError(f"bad boolean for {key}: {raw!r}")
    if tp == "int":
        return int(raw)
    if tp == "float":
        return float(raw)
    if tp == "int | None":
        return None if raw.lower() in ("none", "") else int(raw)
    if tp.startswith("tuple[int"):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if tp.startswith("tuple[float"):
        return tuple(float(v) for v in raw.split(",") if v.strip())
    return raw


def parse_config_text(text: str) -> dict:
    """key = value lines; '#' starts a comment; unknown keys are rejected."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            out[key] = _parse_value(key, raw)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"line {lineno}: bad value for {key}: {e}") from e
    return out


def build_config(preset: str | None = None, config_path=None, overrides: dict | None = None
                 ) -> RunConfig:
    """defaults <- preset <- config file <- explicit overrides."""
    values: dict = {}
    file_values: dict = {}
    if config_path is not None:
        file_values = parse_config_text(Path(config_path).read_text(encoding="utf-8"))
    name = preset or file_values.get("preset") or "tiny"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    values["preset"] = name
    values.update(PRESETS[name])
    values.update(file_values)
    if preset is not None:
        values["preset"] = preset
    for k, v in (overrides or {}).items():
        if k not in _FIELDS:
            raise ConfigError(f"unknown config key {k!r}")
        if v is not None:
            values[k] = v
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e
