"""Binary checkpoint container.

Layout::

    b"CDCK" | u32 LE version | u64 LE manifest length | UTF-8 JSON manifest | f32 LE payload

The manifest holds ``tensors`` (sorted by name; each ``{name, shape, dtype,
offset, length}`` with byte offsets relative to the payload start) plus
free-form ``config``, ``rng``, ``counters`` and ``optim`` entries.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

MAGIC = b"CDCK"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    rng: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    optim: dict = field(default_factory=dict)
    version: int = VERSION


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32",
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = _canonical({"tensors": entries, "config": ckpt.config, "rng": ckpt.rng,
                           "counters": ckpt.counters, "optim": ckpt.optim})
    return _HEAD.pack(MAGIC, ckpt.version, len(manifest)) + manifest + b"".join(chunks)


def from_bytes(buf: bytes) -> Checkpoint:
    if len(buf) < _HEAD.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, mlen = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    start = _HEAD.size
    if len(buf) < start + mlen:
        raise CheckpointError("truncated checkpoint manifest")
    try:
        manifest = json.loads(buf[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    payload = memoryview(buf)[start + mlen:]
    tensors = {}
    seen = set()
    for e in manifest["tensors"]:
        name = e["name"]
        if name in seen:
            raise CheckpointError(f"duplicate tensor {name}")
        seen.add(name)
        if e["dtype"] != "f32":
            raise CheckpointError(f"unsupported dtype {e['dtype']} for {name}")
        end = e["offset"] + e["length"]
        if end > len(payload):
            raise CheckpointError(f"truncated payload: tensor {name} needs bytes up to {end}, "
                                  f"payload has {len(payload)}")
        arr = np.frombuffer(payload[e["offset"]:end], dtype="<f4").astype(np.float32)
        tensors[name] = arr.reshape(e["shape"])
    return Checkpoint(tensors=tensors, config=manifest.get("config", {}), rng=manifest.get("rng", {}),
                      counters=manifest.get("counters", {}), optim=manifest.get("optim", {}),
                      version=version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = to_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
