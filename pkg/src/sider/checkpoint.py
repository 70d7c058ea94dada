"""Checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7     magic  b"SIDERCKP"
    bytes 8..11    uint32 format version
    bytes 12..15   uint32 header length N
    bytes 16..16+N UTF-8 JSON header:
                     {"kind", "arch", "meta", "param_count",
                      "tensors": [{"name", "shape", "offset", "count"}, ...]}
    rest           float32 LE blocks, one per tensor, at the recorded
                   element offsets, in header order

Writes go to a temp file in the target directory and are renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SIDERCKP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_state(state: dict[str, torch.Tensor], kind: str, arch: dict, meta: dict | None = None) -> bytes:
    entries, blocks, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blocks.append(np.ascontiguousarray(arr).tobytes())
        offset += int(arr.size)
    header = json.dumps({
        "kind": kind,
        "arch": arch,
        "meta": meta or {},
        "param_count": offset,
        "tensors": entries,
    }, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(blocks)


def decode_state(data: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    body = np.frombuffer(data, dtype="<f4", offset=16 + hlen)
    if body.size != header["param_count"]:
        raise CheckpointError("checkpoint body length does not match header")
    state = {}
    for e in header["tensors"]:
        arr = body[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(np.float32))
    return header, state


def save_module(path: str | Path, module: torch.nn.Module, kind: str, meta: dict | None = None) -> str:
    """Write ``module`` (which must carry an ``arch`` dict) and return the file's sha256."""
    data = encode_state(module.state_dict(), kind, module.arch, meta)
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    return decode_state(Path(path).read_bytes())


def load_module(path: str | Path, registry: dict[str, type]) -> tuple[torch.nn.Module, dict]:
    header, state = read_checkpoint(path)
    cls = registry.get(header["kind"])
    if cls is None:
        raise CheckpointError(f"unknown checkpoint kind {header['kind']!r}")
    module = cls(**header["arch"])
    module.load_state_dict(state)
    return module, header


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
