"""Byte-stable checkpoint files: a JSON manifest followed by raw float payloads.

Layout:  8-byte magic ``SFCKPT01`` | u32 manifest length | manifest JSON |
concatenated parameter payloads as little-endian float64 in manifest order.
The manifest lists (name, shape, group) sorted by name plus the step counter,
so identical parameter states always serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .layers import Parameter

MAGIC = b"SFCKPT01"


def save_checkpoint(path, params: Sequence[Parameter], step: int = 0) -> None:
    entries = sorted(params, key=lambda p: p.name)
    names = [p.name for p in entries]
    if len(set(names)) != len(names) or "" in names:
        raise ValueError("checkpoint requires unique, non-empty parameter names")
    manifest = {
        "format": 1,
        "step": int(step),
        "params": [
            {"name": p.name, "shape": list(p.data.shape), "group": p.group} for p in entries
        ],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in entries:
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[int, dict[str, np.ndarray], dict[str, str]]:
    """Read a checkpoint; returns (step, arrays by name, group tags by name)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (mlen,) = struct.unpack("<I", raw[8:12])
    manifest = json.loads(raw[12 : 12 + mlen].decode("utf-8"))
    if manifest.get("format") != 1:
        raise ValueError(f"{path}: unsupported checkpoint format {manifest.get('format')}")
    arrays: dict[str, np.ndarray] = {}
    groups: dict[str, str] = {}
    offset = 12 + mlen
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        arr = np.frombuffer(raw[offset : offset + nbytes], dtype="<f8").reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
        groups[entry["name"]] = entry["group"]
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: payload length mismatch")
    return int(manifest["step"]), arrays, groups


def apply_checkpoint(params: Sequence[Parameter], path, strict: bool = True) -> int:
    """Load arrays into matching parameters by name; returns the stored step."""
    step, arrays, _ = load_checkpoint(path)
    by_name = {p.name: p for p in params}
    missing = sorted(set(by_name) - set(arrays))
    extra = sorted(set(arrays) - set(by_name))
    if strict and (missing or extra):
        raise ValueError(
            f"checkpoint mismatch: missing {missing[:5]}{'...' if len(missing) > 5 else ''}, "
            f"unexpected {extra[:5]}{'...' if len(extra) > 5 else ''}"
        )
    for name, arr in arrays.items():
        if name in by_name:
            by_name[name].data = arr
    return step
