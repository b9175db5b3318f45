"""Ground-truth-backed proxies for entity recall and shot-cut structure."""

from __future__ import annotations

import numpy as np
import torch

from ..stream import LatentChunk, ShotSchedule


def recall_error(chunk: LatentChunk, record) -> float:
    """Normalized L2 distance between the generated entity region and the true patch.

    Only frames of ``chunk`` where the record says the entity is visible count;
    a record with no such frame is rejected.
    """
    first = chunk.first_frame
    rows = [f - first for f in record.frames if first <= f < first + len(chunk)]
    if not rows:
        raise ValueError(f"entity is not visible in chunk {chunk.chunk_index}")
    e = record.patch.shape[-1]
    if record.top + e > chunk.frames.shape[-2] or record.left + e > chunk.frames.shape[-1]:
        raise ValueError("entity placement lies outside the frame")
    got = record.region(chunk.frames[rows]).double()
    want = record.patch.double().expand_as(got)
    return float((got - want).norm() / want.norm())


def _chunk_means(frames: torch.Tensor, L: int) -> torch.Tensor:
    n = frames.shape[0] // L
    return frames[: n * L].double().reshape(n, L, -1).mean(dim=1)


def chunk_jumps(frames, schedule: ShotSchedule) -> tuple[np.ndarray, np.ndarray]:
    """RMS change of the chunk-mean latent between consecutive chunks, and a cut flag per jump."""
    if isinstance(frames, (list, tuple)):
        frames = torch.cat([c.frames for c in frames])
    L = schedule.L
    means = _chunk_means(frames, L)
    jumps = (means[1:] - means[:-1]).pow(2).mean(dim=1).sqrt().numpy()
    starts = set(schedule.boundaries)
    is_cut = np.array([(j + 1) * L in starts for j in range(len(jumps))], dtype=bool)
    return jumps, is_cut


def shotcut_proxy(frames, schedule: ShotSchedule) -> float:
    """Fraction of requested cuts whose jump exceeds the 95th percentile of within-shot jumps."""
    if schedule.num_shots < 2:
        raise ValueError("shot-cut proxy needs at least two shots")
    jumps, is_cut = chunk_jumps(frames, schedule)
    if not is_cut.any():
        raise ValueError("no boundary falls between generated chunks")
    within = jumps[~is_cut]
    threshold = float(np.percentile(within, 95)) if within.size else 0.0
    return float((jumps[is_cut] > threshold).mean())
