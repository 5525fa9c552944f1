"""Weight container: ``SPXW`` magic, u16 version, u32 manifest length, JSON
manifest (entry names/shapes plus free-form metadata), raw little-endian
float32 payload in manifest order, SHA-256 of everything before it.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

MAGIC = b"SPXW"
VERSION = 1
_HEAD = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def encode_weights(tensors: Dict[str, torch.Tensor], meta: Optional[dict] = None) -> bytes:
    entries, blobs = [], []
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes(order="C"))
    manifest = json.dumps({"meta": meta or {}, "entries": entries}, sort_keys=True).encode()
    body = _HEAD.pack(MAGIC, VERSION, len(manifest)) + manifest + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def decode_weights(data: bytes) -> Tuple[Dict[str, torch.Tensor], dict]:
    if len(data) < _HEAD.size + 32:
        raise CheckpointError("truncated weight file")
    magic, version, mlen = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not an SPXW weight file")
    if version != VERSION:
        raise CheckpointError(f"unsupported weight file version {version}")
    if hashlib.sha256(data[:-32]).digest() != data[-32:]:
        raise CheckpointError("checksum mismatch")
    manifest = json.loads(data[_HEAD.size: _HEAD.size + mlen])
    off = _HEAD.size + mlen
    out = {}
    for e in manifest["entries"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(data, "<f4", n, off).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(arr.astype(np.float32))
        off += 4 * n
    if off != len(data) - 32:
        raise CheckpointError("payload size does not match the manifest")
    return out, manifest["meta"]


def state_tensors(model: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v for k, v in model.state_dict().items() if v.is_floating_point()}


def save(model: nn.Module, path, meta: Optional[dict] = None) -> None:
    Path(path).write_bytes(encode_weights(state_tensors(model), meta))


def load(path) -> Tuple[Dict[str, torch.Tensor], dict]:
    return decode_weights(Path(path).read_bytes())


def load_into(model: nn.Module, tensors: Dict[str, torch.Tensor], prefix: str = "",
              skip_prefixes=()) -> list:
    """Copy matching entries into ``model``; shape mismatches are errors. Returns loaded names."""
    own = model.state_dict()
    loaded = []
    with torch.no_grad():
        for name, t in tensors.items():
            if not name.startswith(prefix) or any(name.startswith(s) for s in skip_prefixes):
                continue
            if name not in own:
                continue
            if tuple(own[name].shape) != tuple(t.shape):
                raise CheckpointError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(own[name].shape)}")
            own[name].copy_(t.to(own[name].dtype))
            loaded.append(name)
    return loaded


def load_backbone_weights(model: nn.Module, path) -> list:
    """Import externally supplied transformer-core weights (names under ``encoder.blocks``)."""
    tensors, _ = load(path)
    core = {k: v for k, v in tensors.items() if ".aomoa." not in k and "lora_" not in k}
    return load_into(model, core, prefix="encoder.blocks.")
