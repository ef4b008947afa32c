"""Synthetic motion corpus with templated, machine-invertible captions.

Channel layout (C=8), sampled at FPS frames per second:
  0  root x position, integral of speed * cos(heading)
  1  root z position, integral of speed * sin(heading)
  2  root yaw (constant heading for locomotion classes; a ramp for turns)
  3  limb phase sine at a class-dependent frequency
  4  limb phase quadrature component
  5  vertical offset (large bounce for jumps, small bob otherwise)
  6  speed
  7  seeded low-amplitude noise

Caption grammar (invertible; the parser recovers the exact label tuple):
  "a person" VERB [ADV] [DIR]
  VERB: walks | runs | jumps | turns left | turns right
  ADV:  slowly | quickly          (omitted for the middle speed bucket)
  DIR:  forward | backward | to the left | to the right
        (omitted for turn classes, whose direction bucket is the turn side)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BoundsError, CountError, DataError, FormatError, VersionError
from .text import TextContext, embed_text

CORPUS_VERSION = "1"
MOTION_MAGIC = b"MOTN"
MOTION_FORMAT_VERSION = 1
FPS = 20.0
MAX_FRAMES = 196

CLASSES = ("walk", "run", "jump", "turn_left", "turn_right")
LIMB_FREQ = {"walk": 1.0, "run": 2.5, "jump": 0.8, "turn_left": 1.0, "turn_right": 1.0}
SPEED_BUCKETS = ("slow", "normal", "quick")
SPEED_EDGES = (0.7, 1.4)
DIR_BUCKETS = ("forward", "left", "backward", "right")

_VERBS = {"walk": "walks", "run": "runs", "jump": "jumps",
          "turn_left": "turns left", "turn_right": "turns right"}
_ADVERBS = {"slow": "slowly", "quick": "quickly"}
_DIR_PHRASES = {"forward": "forward", "backward": "backward",
                "left": "to the left", "right": "to the right"}


@dataclass
class GenParams:
    class_id: str
    speed: float
    direction: float
    amplitude: float
    frames: int
    seed: int


@dataclass
class MotionSequence:
    data: np.ndarray  # [F, C] float32
    caption: str
    params: GenParams | None = None

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]


def speed_bucket(speed: float) -> str:
    if speed < SPEED_EDGES[0]:
        return "slow"
    if speed < SPEED_EDGES[1]:
        return "normal"
    return "quick"


def direction_bucket(theta: float) -> str:
    a = np.arctan2(np.sin(theta), np.cos(theta))  # wrap to (-pi, pi]
    if abs(a) <= np.pi / 4:
        return "forward"
    if abs(a) >= 3 * np.pi / 4:
        return "backward"
    return "left" if a > 0 else "right"


def labels_for(params: GenParams) -> tuple[str, str, str]:
    cls = params.class_id
    if cls == "turn_left":
        dbucket = "left"
    elif cls == "turn_right":
        dbucket = "right"
    else:
        dbucket = direction_bucket(params.direction)
    return cls, speed_bucket(params.speed), dbucket


def caption_for(cls: str, sbucket: str, dbucket: str) -> str:
    words = ["a person", _VERBS[cls]]
    if sbucket in _ADVERBS:
        words.append(_ADVERBS[sbucket])
    if cls not in ("turn_left", "turn_right"):
        words.append(_DIR_PHRASES[dbucket])
    return " ".join(words)


def parse_caption(caption: str) -> tuple[str, str, str]:
    """Invert caption_for exactly; raises FormatError on anything else."""
    text = caption.strip().lower()
    prefix = "a person "
    if not text.startswith(prefix):
        raise FormatError(f"unparsable caption: {caption!r}")
    rest = text[len(prefix):]
    cls = None
    for c, verb in sorted(_VERBS.items(), key=lambda kv: -len(kv[1])):
        if rest == verb or rest.startswith(verb + " "):
            cls = c
            rest = rest[len(verb):].strip()
            break
    if cls is None:
        raise FormatError(f"unparsable caption: {caption!r}")
    sbucket = "normal"
    for b, adv in _ADVERBS.items():
        if rest == adv or rest.startswith(adv + " "):
            sbucket = b
            rest = rest[len(adv):].strip()
            break
    if cls in ("turn_left", "turn_right"):
        if rest:
            raise FormatError(f"unparsable caption: {caption!r}")
        return cls, sbucket, "left" if cls == "turn_left" else "right"
    for d, phrase in _DIR_PHRASES.items():
        if rest == phrase:
            return cls, sbucket, d
    raise FormatError(f"unparsable caption: {caption!r}")


def generate_motion(class_id: str, speed: float, direction: float, amplitude: float,
                    frames: int, seed: int) -> MotionSequence:
    """Deterministic procedural motion for one record."""
    if class_id not in CLASSES:
        raise BoundsError(f"unknown action class: {class_id}")
    if not (40 <= frames <= MAX_FRAMES):
        raise BoundsError(f"frames={frames} outside [40, {MAX_FRAMES}]")
    if speed < 0 or amplitude < 0:
        raise BoundsError("speed and amplitude must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF]))
    dt = 1.0 / FPS
    t = np.arange(frames) * dt
    turning = class_id in ("turn_left", "turn_right")
    if turning:
        target = abs(direction) if class_id == "turn_left" else -abs(direction)
        heading = np.linspace(0.0, target, frames)
    else:
        heading = np.full(frames, direction)
    pos_x = np.cumsum(speed * np.cos(heading) * dt) - speed * np.cos(heading[0]) * dt
    pos_z = np.cumsum(speed * np.sin(heading) * dt) - speed * np.sin(heading[0]) * dt
    freq = LIMB_FREQ[class_id]
    phase = rng.uniform(0.0, 2 * np.pi)
    limb1 = amplitude * np.sin(2 * np.pi * freq * t + phase)
    limb2 = amplitude * np.sin(2 * np.pi * freq * t + phase + np.pi / 2)
    if class_id == "jump":
        vertical = amplitude * np.abs(np.sin(2 * np.pi * freq * t + phase))
    else:
        vertical = 0.05 * amplitude * np.sin(2 * np.pi * freq * t + phase)
    jitter = 0.01 * amplitude
    data = np.stack([
        pos_x,
        pos_z,
        heading + rng.normal(0.0, jitter, frames),
        limb1 + rng.normal(0.0, jitter, frames),
        limb2 + rng.normal(0.0, jitter, frames),
        vertical + rng.normal(0.0, jitter, frames),
        np.full(frames, speed) + rng.normal(0.0, jitter, frames),
        rng.normal(0.0, 0.05 * amplitude, frames),
    ], axis=1).astype(np.float32)
    params = GenParams(class_id, speed, direction, amplitude, frames, seed)
    caption = caption_for(*labels_for(params))
    return MotionSequence(data=data, caption=caption, params=params)


# label tuples are sampled uniformly so that chance-level matching is ~1/K
VALID_TUPLES: list[tuple[str, str, str]] = (
    [(c, s, d) for c in ("walk", "run", "jump") for s in SPEED_BUCKETS for d in DIR_BUCKETS]
    + [("turn_left", s, "left") for s in SPEED_BUCKETS]
    + [("turn_right", s, "right") for s in SPEED_BUCKETS]
)

_SPEED_RANGES = {"slow": (0.3, 0.65), "normal": (0.75, 1.35), "quick": (1.45, 2.0)}
_DIR_MARGIN = 0.1


def _sample_direction(rng: np.random.Generator, dbucket: str) -> float:
    q = np.pi / 4
    if dbucket == "forward":
        return rng.uniform(-q + _DIR_MARGIN, q - _DIR_MARGIN)
    if dbucket == "left":
        return rng.uniform(q + _DIR_MARGIN, 3 * q - _DIR_MARGIN)
    if dbucket == "right":
        return rng.uniform(-3 * q + _DIR_MARGIN, -q - _DIR_MARGIN)
    mag = rng.uniform(3 * q + _DIR_MARGIN, np.pi)
    return mag if rng.random() < 0.5 else -mag


def sample_params(rng: np.random.Generator, frames_min: int, frames_max: int, seed: int) -> GenParams:
    cls, sbucket, dbucket = VALID_TUPLES[rng.integers(len(VALID_TUPLES))]
    speed = rng.uniform(*_SPEED_RANGES[sbucket])
    if cls in ("turn_left", "turn_right"):
        direction = rng.uniform(np.pi / 3, np.pi)
    else:
        direction = _sample_direction(rng, dbucket)
    amplitude = rng.uniform(0.6, 1.4)
    frames = int(rng.integers(frames_min, frames_max + 1))
    return GenParams(cls, speed, direction, amplitude, frames, seed)


@dataclass
class CorpusConfig:
    channels: int = 8
    frames_min: int = 64
    frames_max: int = 64


def split_counts(size: int) -> tuple[int, int, int]:
    """80/5/15 train/val/test; floor each split, remainder goes to train."""
    n_train = int(np.floor(0.8 * size))
    n_val = int(np.floor(0.05 * size))
    n_test = int(np.floor(0.15 * size))
    n_train += size - (n_train + n_val + n_test)
    return n_train, n_val, n_test


def build_corpus(size: int, seed: int, out_dir, config: CorpusConfig | None = None) -> dict:
    """Generate, normalize and serialize a corpus; returns the manifest dict."""
    if size < 1:
        raise BoundsError("corpus size must be >= 1")
    config = config or CorpusConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(size):
        rec_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        rng = np.random.default_rng(np.random.SeedSequence([seed, i, 1]))
        params = sample_params(rng, config.frames_min, config.frames_max, rec_seed)
        records.append(generate_motion(params.class_id, params.speed, params.direction,
                                       params.amplitude, params.frames, rec_seed))
    n_train, _, _ = split_counts(size)
    train_data = np.concatenate([r.data for r in records[:n_train]], axis=0)
    mean = train_data.mean(axis=0).astype(np.float64)
    std = train_data.std(axis=0).astype(np.float64)
    std = np.where(std < 1e-6, 1.0, std)
    manifest = {
        "version": CORPUS_VERSION,
        "count": size,
        "channels": config.channels,
        "mean": mean.tolist(),
        "std": std.tolist(),
        "seed": seed,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    write_motions(out / "motions.bin", [r.data for r in records])
    with open(out / "captions.txt", "w", encoding="utf-8") as f:
        for r in records:
            f.write(r.caption + "\n")
    return manifest


def write_motions(path, arrays: list[np.ndarray]):
    """Serialize [F, C] float32 arrays in the motions.bin format."""
    with open(path, "wb") as f:
        f.write(MOTION_MAGIC)
        f.write(bytes([MOTION_FORMAT_VERSION]))
        for a in arrays:
            f.write(struct.pack("<II", a.shape[0], a.shape[1]))
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


@dataclass
class Corpus:
    """Loaded corpus; record data is normalized with the stored statistics."""

    records: list[tuple[MotionSequence, TextContext]]
    manifest: dict
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mean = np.asarray(self.manifest["mean"], dtype=np.float32)
        self.std = np.asarray(self.manifest["std"], dtype=np.float32)

    def __len__(self):
        return len(self.records)

    def splits(self) -> tuple[range, range, range]:
        n_train, n_val, n_test = split_counts(len(self.records))
        return (range(0, n_train), range(n_train, n_train + n_val),
                range(n_train + n_val, n_train + n_val + n_test))

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return ((raw - self.mean) / self.std).astype(np.float32)

    def denormalize(self, data: np.ndarray) -> np.ndarray:
        return (data * self.std + self.mean).astype(np.float32)


def load_corpus(path, d_text: int = 32) -> Corpus:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataError(f"missing manifest: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"unreadable manifest: {e}") from e
    if manifest.get("version") != CORPUS_VERSION:
        raise VersionError(f"corpus version {manifest.get('version')!r} != {CORPUS_VERSION!r}")
    captions = (root / "captions.txt").read_text(encoding="utf-8").splitlines()
    raw = (root / "motions.bin").read_bytes()
    if raw[:4] != MOTION_MAGIC:
        raise FormatError("bad motion file magic")
    if raw[4] != MOTION_FORMAT_VERSION:
        raise VersionError(f"motion format version {raw[4]} != {MOTION_FORMAT_VERSION}")
    mean = np.asarray(manifest["mean"], dtype=np.float32)
    std = np.asarray(manifest["std"], dtype=np.float32)
    records: list[tuple[MotionSequence, TextContext]] = []
    off = 5
    while off < len(raw):
        if off + 8 > len(raw):
            raise FormatError("truncated record header")
        frames, channels = struct.unpack_from("<II", raw, off)
        off += 8
        nbytes = frames * channels * 4
        if off + nbytes > len(raw):
            raise FormatError("truncated record payload")
        data = np.frombuffer(raw, dtype="<f4", count=frames * channels, offset=off)
        off += nbytes
        data = data.reshape(frames, channels)
        i = len(records)
        caption = captions[i] if i < len(captions) else ""
        norm = ((data - mean) / std).astype(np.float32)
        records.append((MotionSequence(data=norm, caption=caption),
                        embed_text(caption, d_text=d_text)))
    if len(records) != manifest["count"]:
        raise CountError(f"manifest declares {manifest['count']} records, file has {len(records)}")
    if len(captions) != len(records):
        raise CountError(f"{len(captions)} captions for {len(records)} records")
    return Corpus(records=records, manifest=manifest)
