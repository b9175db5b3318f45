"""Packed 2N-segment teacher-forcing layout and its visibility structures.

The packed sequence holds ``N`` clean chunks followed by ``N`` noisy copies of
the same chunks. Visibility is expressed at frame granularity: spatial tokens
of a visible frame are all visible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch

from .stream import ShotSchedule


@dataclass(frozen=True)
class PackedSequence:
    N: int
    L: int

    def __post_init__(self):
        if self.N < 1 or self.L < 1:
            raise ValueError(f"need N >= 1 and L >= 1, got N={self.N}, L={self.L}")

    @property
    def num_frames(self) -> int:
        return 2 * self.N * self.L

    def segment_frames(self, segment: int) -> range:
        """Packed frame rows of 1-based ``segment`` (``1..N`` clean, ``N+1..2N`` noisy)."""
        if not 1 <= segment <= 2 * self.N:
            raise ValueError(f"segment {segment} outside 1..{2 * self.N}")
        start = (segment - 1) * self.L
        return range(start, start + self.L)

    def chunk_of_segment(self, segment: int) -> int:
        return (segment - 1) % self.N + 1

    def is_noisy(self, segment: int) -> bool:
        return segment > self.N

    def segment_of_frame(self, frame: int) -> int:
        return frame // self.L + 1

    def chunk_of_frame(self, frame: int) -> int:
        return (frame // self.L) % self.N + 1


@dataclass(frozen=True)
class VisibilityMask:
    """Boolean ``(2NL, 2NL)`` relation; ``matrix[q, k]`` is True when query frame q sees key frame k."""

    layout: PackedSequence
    matrix: torch.Tensor

    def visible_keys(self, query_frame: int) -> list[int]:
        return torch.nonzero(self.matrix[query_frame]).flatten().tolist()

    def to_ascii(self) -> str:
        """Chunk-level grid, rows are query segments, ``#`` where any frame is visible."""
        lay = self.layout
        labels = [f"c{i}" for i in range(1, lay.N + 1)] + [f"n{i}" for i in range(1, lay.N + 1)]
        width = max(len(s) for s in labels)
        lines = [" " * (width + 1) + " ".join(s.rjust(width) for s in labels)]
        for qs in range(1, 2 * lay.N + 1):
            rows = list(lay.segment_frames(qs))
            cells = []
            for ks in range(1, 2 * lay.N + 1):
                block = self.matrix[rows][:, list(lay.segment_frames(ks))]
                full = bool(block.all())
                cells.append(("#" if full else "+" if block.any() else ".").rjust(width))
            lines.append(labels[qs - 1].rjust(width) + " " + " ".join(cells))
        return "\n".join(lines)


def _field_frames(field) -> set[int]:
    """History frames (0-based global frame indices) a receptive field exposes."""
    if hasattr(field, "history_frames"):
        return set(field.history_frames)
    return {int(f) for f in field}


def build_tf_mask(N: int, L: int, routing: Mapping[int, object] | Sequence | None = None,
                  route_clean: bool = True) -> VisibilityMask:
    """Self-attention visibility of the packed layout.

    Quadrants, per chunk ``i``:
      clean->clean  clean chunks ``<= i``
      noisy->clean  clean chunks ``< i``
      noisy->noisy  only noisy chunk ``i`` itself
      clean->noisy  nothing

    ``routing`` maps 1-based chunk index to a receptive field (anything with
    ``history_frames`` or an iterable of global frame indices). When supplied,
    the history a chunk sees is restricted to those frames; ``route_clean``
    applies the same restriction to the clean->clean quadrant.
    """
    layout = PackedSequence(N, L)
    if routing is not None and not isinstance(routing, Mapping):
        routing = {i + 1: f for i, f in enumerate(routing)}
    if routing is not None:
        for i, field in routing.items():
            if not 1 <= int(i) <= N:
                raise ValueError(f"routing refers to chunk {i}, layout has {N}")
            bad = [f for f in _field_frames(field) if not 0 <= f < N * L]
            if bad:
                raise ValueError(f"routing for chunk {i} refers to frames {bad} outside 0..{N * L - 1}")

    NL = N * L
    m = torch.zeros(2 * NL, 2 * NL, dtype=torch.bool)
    for i in range(1, N + 1):
        own = slice((i - 1) * L, i * L)
        past = list(range((i - 1) * L))
        if routing is not None and i in routing:
            past = sorted(f for f in _field_frames(routing[i]) if f < (i - 1) * L)
        noisy_rows = slice(NL + (i - 1) * L, NL + i * L)
        m[noisy_rows, past] = True
        m[noisy_rows, NL + (i - 1) * L: NL + i * L] = True
        clean_past = past if route_clean else list(range((i - 1) * L))
        m[own, clean_past] = True
        m[own, own] = True
    return VisibilityMask(layout, m)


def build_cross_routing(N: int, schedule: ShotSchedule) -> dict[int, int]:
    """Packed segment (1..2N) -> 1-based prompt index; both copies of chunk i share ``pi(i)``."""
    out = {}
    for i in range(1, N + 1):
        shot = schedule.shot_of_chunk(i)
        out[i] = shot
        out[N + i] = shot
    return out


def cross_routing_frames(N: int, L: int, schedule: ShotSchedule) -> torch.Tensor:
    """0-based prompt index for every packed frame row."""
    seg = build_cross_routing(N, schedule)
    return torch.tensor([seg[s] - 1 for s in range(1, 2 * N + 1) for _ in range(L)], dtype=torch.long)
