"""Versioned binary container for model checkpoints and session snapshots.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic (b"SCKP" checkpoint, b"SCSN" session snapshot)
    4       4     uint32 format version
    8       8     uint64 header length n
    16      n     UTF-8 JSON header: {"meta": {...}, "manifest": [entry, ...]}
    16+n    ...   payload; each manifest entry is
                  {"name", "dtype": "<f4"|"<f8"|"<i8"|"|u1", "shape", "offset", "nbytes"}
                  with ``offset`` relative to the payload start

Checkpoint parameters are always stored as ``<f4``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch

CHECKPOINT_MAGIC = b"SCKP"
SNAPSHOT_MAGIC = b"SCSN"
FORMAT_VERSION = 1

_PREAMBLE = struct.Struct("<4sIQ")
_DTYPES = {"<f4": np.float32, "<f8": np.float64, "<i8": np.int64, "|u1": np.uint8}


class ContainerError(ValueError):
    pass


def _dtype_code(t: torch.Tensor, force_f32: bool) -> str:
    if force_f32 or t.dtype == torch.float32:
        return "<f4"
    if t.dtype == torch.float64:
        return "<f8"
    if t.dtype == torch.uint8:
        return "|u1"
    if t.dtype in (torch.int64, torch.int32):
        return "<i8"
    raise ContainerError(f"unsupported tensor dtype {t.dtype}")


def dumps(magic: bytes, meta: dict, tensors: dict[str, torch.Tensor], force_f32: bool = False) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, t in tensors.items():
        code = _dtype_code(t, force_f32)
        arr = np.ascontiguousarray(t.detach().cpu().numpy().astype(_DTYPES[code], copy=False))
        raw = arr.astype(np.dtype(code), copy=False).tobytes()
        manifest.append({"name": name, "dtype": code, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "manifest": manifest}, sort_keys=True).encode("utf-8")
    return _PREAMBLE.pack(magic, FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes, magic: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    if len(blob) < _PREAMBLE.size:
        raise ContainerError("truncated container preamble")
    got_magic, version, hlen = _PREAMBLE.unpack_from(blob)
    if got_magic != magic:
        raise ContainerError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version} (reader is {FORMAT_VERSION})")
    start = _PREAMBLE.size
    if start + hlen > len(blob):
        raise ContainerError("header runs past end of data")
    try:
        header = json.loads(blob[start:start + hlen].decode("utf-8"))
        meta, manifest = header["meta"], header["manifest"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ContainerError(f"corrupted container header: {exc}") from exc
    payload = memoryview(blob)[start + hlen:]
    tensors = {}
    for entry in manifest:
        try:
            dt = np.dtype(entry["dtype"])
            off, n, shape = int(entry["offset"]), int(entry["nbytes"]), tuple(entry["shape"])
        except (KeyError, TypeError) as exc:
            raise ContainerError(f"bad manifest entry {entry!r}") from exc
        if off < 0 or off + n > len(payload) or n != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise ContainerError(f"tensor {entry.get('name')!r} does not fit the payload")
        arr = np.frombuffer(payload[off:off + n], dtype=dt).reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))
    return meta, tensors


def write(path: str | Path | BinaryIO, blob: bytes) -> None:
    if isinstance(path, (str, Path)):
        Path(path).write_bytes(blob)
    else:
        path.write(blob)


def read(path: str | Path | BinaryIO | bytes) -> bytes:
    if isinstance(path, (bytes, bytearray)):
        return bytes(path)
    if isinstance(path, (str, Path)):
        return Path(path).read_bytes()
    return path.read()


def save_checkpoint(model, path: str | Path | BinaryIO, extra: dict | None = None) -> None:
    meta = {"config": model.config.to_dict(), **(extra or {})}
    write(path, dumps(CHECKPOINT_MAGIC, meta, dict(model.state_dict()), force_f32=True))


def load_checkpoint(path: str | Path | BinaryIO | bytes):
    from .model import ModelConfig, VelocityTransformer

    meta, tensors = loads(read(path), CHECKPOINT_MAGIC)
    model = VelocityTransformer(ModelConfig.from_dict(meta["config"]))
    try:
        model.load_state_dict(tensors)
    except RuntimeError as exc:
        raise ContainerError(f"checkpoint does not match its config: {exc}") from exc
    return model, meta


def parameter_hash(model) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


__all__ = ["ContainerError", "dumps", "loads", "save_checkpoint", "load_checkpoint", "parameter_hash",
           "CHECKPOINT_MAGIC", "SNAPSHOT_MAGIC", "FORMAT_VERSION"]
