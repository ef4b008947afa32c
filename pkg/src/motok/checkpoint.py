"""Checkpoint container: "LGTOK1\\n" header, JSON manifest, f32 payload.

Layout: header line, UTF-8 JSON manifest terminated by a blank line
("\\n\\n"), then the named tensors as concatenated little-endian float32
arrays at the offsets recorded in the manifest.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"LGTOK1\n"


def save_checkpoint(path, arrays: dict[str, np.ndarray], extra: dict | None = None):
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = dict(extra or {})
    manifest["tensors"] = entries
    payload = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(payload)
        f.write(b"\n\n")
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise FormatError(f"{path}: bad checkpoint magic")
    body = raw[len(MAGIC):]
    sep = body.find(b"\n\n")
    if sep < 0:
        raise FormatError(f"{path}: missing manifest terminator")
    try:
        manifest = json.loads(body[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable manifest: {e}") from e
    blob = body[sep + 2:]
    entries = manifest.get("tensors")
    if entries is None:
        raise FormatError(f"{path}: manifest lacks tensor table")
    expected = sum(int(np.prod(e["shape"])) * 4 for e in entries)
    if len(blob) != expected:
        raise FormatError(f"{path}: payload is {len(blob)} bytes, manifest declares {expected}")
    arrays = {}
    for e in entries:
        n = int(np.prod(e["shape"])) * 4
        arr = np.frombuffer(blob[e["offset"]:e["offset"] + n], dtype="<f4")
        arrays[e["name"]] = arr.reshape(e["shape"]).copy()
    return arrays, manifest
