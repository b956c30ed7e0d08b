"""Binary checkpoints: magic header, then little-endian length-prefixed
sections (config text, json metadata, named tensors, optimizer tensors,
RNG state)."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MITCKPT1"


class CheckpointError(ValueError):
    pass


def _pack_tensors(tensors: dict) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        data = np.asarray(getattr(arr, "data", arr), dtype=np.float64)
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def _unpack_tensors(blob: bytes) -> dict:
    out = {}
    (count,) = struct.unpack_from("<I", blob, 0)
    pos = 4
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        out[name] = arr.copy()
    if pos != len(blob):
        raise CheckpointError("trailing bytes in tensor section")
    return out


def save_checkpoint(path, config_text: str, epoch: int, step_count: int,
                    params: dict, opt_tensors: dict, rng_state: dict):
    sections = [
        config_text.encode(),
        json.dumps({"epoch": epoch, "step_count": step_count}).encode(),
        _pack_tensors({k: p.data for k, p in params.items()}),
        _pack_tensors(opt_tensors),
        json.dumps(rng_state).encode(),
    ]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for sec in sections:
            fh.write(struct.pack("<Q", len(sec)))
            fh.write(sec)


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic header (expected {MAGIC.decode()})")
    pos = len(MAGIC)
    sections = []
    while pos < len(raw):
        if pos + 8 > len(raw):
            raise CheckpointError(f"{path}: truncated section header at {pos}")
        (length,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        if pos + length > len(raw):
            raise CheckpointError(f"{path}: truncated section at {pos}")
        sections.append(raw[pos:pos + length])
        pos += length
    if len(sections) != 5:
        raise CheckpointError(f"{path}: expected 5 sections, found {len(sections)}")
    meta = json.loads(sections[1])
    return {
        "config_text": sections[0].decode(),
        "epoch": int(meta["epoch"]),
        "step_count": int(meta["step_count"]),
        "params": _unpack_tensors(sections[2]),
        "opt_tensors": _unpack_tensors(sections[3]),
        "rng_state": json.loads(sections[4]),
    }
