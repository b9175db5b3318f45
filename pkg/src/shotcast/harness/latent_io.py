"""Latent tensors on disk: raw little-endian float32 plus a JSON sidecar.

``name.bin`` holds the values in C order; ``name.json`` holds
``{"shape": [...], "dtype": "<f4", ...extra}``. Any language that can read
floats can load them.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".bin", ".json") else p
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def save_latents(path, frames: torch.Tensor, **extra) -> Path:
    bin_path, meta_path = _paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(frames.detach().cpu().numpy(), dtype="<f4")
    bin_path.write_bytes(arr.tobytes())
    meta_path.write_text(json.dumps({"shape": list(arr.shape), "dtype": "<f4", **extra}, indent=1))
    return bin_path


def load_latents(path) -> tuple[torch.Tensor, dict]:
    bin_path, meta_path = _paths(path)
    meta = json.loads(meta_path.read_text())
    if meta.get("dtype", "<f4") != "<f4":
        raise ValueError(f"unsupported latent dtype {meta['dtype']!r}")
    raw = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    shape = tuple(meta["shape"])
    if raw.size != int(np.prod(shape)):
        raise ValueError(f"{bin_path} holds {raw.size} values, sidecar says {shape}")
    return torch.from_numpy(raw.reshape(shape).astype(np.float32)), meta
