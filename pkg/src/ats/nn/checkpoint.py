"""Single-file checkpoints: JSON header, float32 blobs, trailing CRC32.

Layout, all little-endian:

    u32 header_length
    header_length bytes of UTF-8 JSON
    one f32 blob per parameter, concatenated in header order
    u32 CRC32 over every preceding byte

The header is ``{"format": 1, "meta": {...}, "params": [{"name", "shape"}]}``
where ``meta`` carries whatever architecture and training configuration the
saver wants to round-trip.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

CHECKPOINT_FORMAT = 1


class CheckpointError(ValueError):
    """Corrupt or incompatible checkpoint file."""


def save_checkpoint(path: str, named_values: list, meta: dict) -> None:
    """Write (name, array) pairs plus a JSON-serializable meta block."""
    names = [n for n, _ in named_values]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names")
    header = {
        "format": CHECKPOINT_FORMAT,
        "meta": meta,
        "params": [{"name": n, "shape": list(np.asarray(v).shape)} for n, v in named_values],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = bytearray()
    body += struct.pack("<I", len(hbytes))
    body += hbytes
    for _, v in named_values:
        body += np.ascontiguousarray(v, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_checkpoint(path: str) -> tuple[dict, dict]:
    """Read a checkpoint; returns (meta, {name: float32 array})."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise CheckpointError("checkpoint too short")
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("checksum mismatch")
    (hlen,) = struct.unpack_from("<I", blob, 0)
    try:
        header = json.loads(blob[4 : 4 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad header: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unsupported format {header.get('format')}")
    values = {}
    offset = 4 + hlen
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob) - 4:
            raise CheckpointError("checkpoint truncated")
        values[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).copy()
        offset = end
    if offset != len(blob) - 4:
        raise CheckpointError("trailing bytes after parameter blobs")
    return header["meta"], values


def load_into(path: str, module) -> dict:
    """Load a checkpoint into a Module's params by name; returns meta."""
    meta, values = load_checkpoint(path)
    named = module.named_params()
    want = {n for n, _ in named}
    have = set(values)
    if want != have:
        missing = sorted(want - have)[:3]
        extra = sorted(have - want)[:3]
        raise CheckpointError(f"parameter names disagree (missing {missing}, extra {extra})")
    for name, p in named:
        if tuple(values[name].shape) != tuple(p.value.shape):
            raise CheckpointError(f"shape mismatch for {name}")
        p.value = values[name].astype(np.float32)
        p.zero_grad()
    return meta
