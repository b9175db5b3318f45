"""Content-addressed KV memory: frame descriptors, relevance scores, top-k retrieval.

Every attention layer owns a :class:`KVMemoryStore`. Routing is parameter-free:
a chunk's mean-pooled query is scored against mean-pooled keys of the
out-of-window history frames, and the best ``k`` frames join the local window.
The same :func:`route` is called by the packed training forward and by the
streaming rollout, which is what keeps the two receptive fields identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

POLICIES = ("camr", "sink", "none")


@dataclass(frozen=True)
class RouterConfig:
    W: int | None = 3  # window in chunks; None means the whole history is the window
    k: int = 5
    policy: str = "camr"
    route_clean: bool = True

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown memory policy {self.policy!r}; expected one of {POLICIES}")
        if self.k < 0 or (self.W is not None and self.W < 0):
            raise ValueError("k and W must be non-negative")

    @property
    def effective_k(self) -> int:
        return 0 if self.policy == "none" else self.k


@dataclass(frozen=True)
class ReceptiveField:
    """Frames chunk ``chunk_index`` attends to, as 0-based global frame indices."""

    chunk_index: int
    memory: tuple[int, ...]
    window: tuple[int, ...]
    current: tuple[int, ...]

    @property
    def history_frames(self) -> tuple[int, ...]:
        return self.memory + self.window

    @property
    def num_frames(self) -> int:
        return len(self.memory) + len(self.window) + len(self.current)


def frame_descriptor(keys: torch.Tensor) -> torch.Tensor:
    """Mean of a frame's keys over its ``P`` spatial tokens: ``(P, H, D) -> (H, D)``."""
    if keys.dim() != 3 or keys.shape[0] < 1:
        raise ValueError(f"expected (P, H, D) keys with P >= 1, got {tuple(keys.shape)}")
    return keys.mean(dim=0)


def chunk_query_descriptor(queries: torch.Tensor) -> torch.Tensor:
    """One routing query per chunk, pooled over its ``L`` frames and ``P`` tokens."""
    if queries.dim() != 4:
        raise ValueError(f"expected (L, P, H, D) queries, got {tuple(queries.shape)}")
    return queries.mean(dim=(0, 1))


def route_score(q: torch.Tensor, d: torch.Tensor) -> float:
    """Head-aggregated dot product; no ``1/sqrt(D)`` scaling."""
    if q.shape != d.shape:
        raise ValueError(f"descriptor shapes differ: {tuple(q.shape)} vs {tuple(d.shape)}")
    return float((q * d).sum())


def _topk(frames: np.ndarray, scores: np.ndarray, k: int) -> list[int]:
    if k <= 0 or frames.size == 0:
        return []
    # primary key: descending score, secondary: ascending frame index
    order = np.lexsort((frames, -scores))
    return sorted(int(f) for f in frames[order[:k]])


def select_topk(scores: Mapping[int, float], k: int) -> list[int]:
    """Frames with the ``k`` highest scores, earliest frame winning ties, returned in ascending order."""
    if k < 0:
        raise ValueError("k must be >= 0")
    frames = np.fromiter(scores.keys(), dtype=np.int64, count=len(scores))
    values = np.fromiter((float(v) for v in scores.values()), dtype=np.float64, count=len(scores))
    return _topk(frames, values, k)


def route(chunk_index: int, L: int, query: torch.Tensor | None, frame_ids: Sequence[int],
          chunk_ids: Sequence[int], descriptors: torch.Tensor | None,
          config: RouterConfig) -> ReceptiveField:
    """Assemble the receptive field of ``chunk_index`` from stored history.

    ``frame_ids``/``chunk_ids`` describe the available history frames (all from
    chunks before ``chunk_index``), ``descriptors`` their ``(F, H, D)`` mean keys.
    """
    i = chunk_index
    current = tuple(range((i - 1) * L, i * L))
    frame_ids = np.asarray(frame_ids, dtype=np.int64)
    chunk_ids = np.asarray(chunk_ids, dtype=np.int64)
    if frame_ids.size and chunk_ids.max() >= i:
        raise ValueError(f"history for chunk {i} contains frames of chunk {int(chunk_ids.max())}")
    lo = 1 if config.W is None else max(1, i - config.W)
    in_window = chunk_ids >= lo
    window = tuple(int(f) for f in frame_ids[in_window])
    hist_rows = np.nonzero(~in_window)[0]
    k = config.effective_k
    if k == 0 or hist_rows.size == 0:
        memory: list[int] = []
    elif config.policy == "sink":
        memory = sorted(int(f) for f in frame_ids[hist_rows])[:k]
    else:
        if query is None or descriptors is None:
            raise ValueError("content routing needs a query descriptor and frame descriptors")
        with torch.no_grad():
            rows = torch.as_tensor(hist_rows, dtype=torch.long)
            scores = (descriptors.index_select(0, rows) * query).sum(dim=(-1, -2))
        memory = _topk(frame_ids[hist_rows], scores.double().numpy(), k)
    return ReceptiveField(i, tuple(memory), window, current)


class KVMemoryStore:
    """Append-only per-layer store of unrotated keys/values and their descriptors.

    Frames carry global (0-based) frame indices and 1-based chunk indices. An
    optional ``max_frames`` cap drops the oldest frames first.
    """

    def __init__(self, max_frames: int | None = None):
        self.max_frames = max_frames
        self._keys: list[torch.Tensor] = []
        self._values: list[torch.Tensor] = []
        self._descriptors: list[torch.Tensor] = []
        self._desc_cache: torch.Tensor | None = None
        self.frame_ids: list[int] = []
        self.chunk_ids: list[int] = []
        self._row: dict[int, int] = {}
        self._base = 0

    def __len__(self) -> int:
        return len(self.frame_ids)

    @property
    def descriptors(self) -> torch.Tensor | None:
        if not self._descriptors:
            return None
        if self._desc_cache is None or self._desc_cache.shape[0] != len(self._descriptors):
            self._desc_cache = torch.stack(self._descriptors)
        return self._desc_cache

    def append_chunk(self, chunk_index: int, keys: torch.Tensor, values: torch.Tensor) -> None:
        """Store the ``(L, P, H, D)`` unrotated keys/values of one clean chunk."""
        if keys.shape != values.shape or keys.dim() != 4:
            raise ValueError("keys and values must share an (L, P, H, D) shape")
        L = keys.shape[0]
        first = (chunk_index - 1) * L
        if self.frame_ids and first <= self.frame_ids[-1]:
            raise ValueError(f"chunk {chunk_index} does not extend the store (last frame {self.frame_ids[-1]})")
        keys = keys.detach()
        values = values.detach()
        for j in range(L):
            self._row[first + j] = self._base + len(self.frame_ids)
            self.frame_ids.append(first + j)
            self.chunk_ids.append(chunk_index)
            self._keys.append(keys[j])
            self._values.append(values[j])
            self._descriptors.append(frame_descriptor(keys[j]))
        self._desc_cache = None
        if self.max_frames is not None and len(self.frame_ids) > self.max_frames:
            self._drop(len(self.frame_ids) - self.max_frames)

    def _drop(self, n: int) -> None:
        for f in self.frame_ids[:n]:
            del self._row[f]
        del self.frame_ids[:n], self.chunk_ids[:n], self._keys[:n], self._values[:n], self._descriptors[:n]
        self._base += n
        self._desc_cache = None

    def gather(self, frame_ids: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        if not frame_ids:
            raise ValueError("nothing to gather")
        rows = [self._row[f] - self._base for f in frame_ids]
        return torch.stack([self._keys[r] for r in rows]), torch.stack([self._values[r] for r in rows])

    def keys_of(self, frame_id: int) -> torch.Tensor:
        return self._keys[self._row[frame_id] - self._base]

    def descriptor_of(self, frame_id: int) -> torch.Tensor:
        return self._descriptors[self._row[frame_id] - self._base]

    def state(self) -> dict:
        if not self.frame_ids:
            return {"frame_ids": [], "chunk_ids": [], "keys": None, "values": None}
        return {
            "frame_ids": list(self.frame_ids),
            "chunk_ids": list(self.chunk_ids),
            "keys": torch.stack(self._keys),
            "values": torch.stack(self._values),
        }

    @classmethod
    def from_state(cls, state: dict, max_frames: int | None = None) -> "KVMemoryStore":
        store = cls(max_frames)
        if not state["frame_ids"]:
            return store
        store._base = 0
        for n, (f, c) in enumerate(zip(state["frame_ids"], state["chunk_ids"])):
            store._row[int(f)] = n
            store.frame_ids.append(int(f))
            store.chunk_ids.append(int(c))
            store._keys.append(state["keys"][n])
            store._values.append(state["values"][n])
            store._descriptors.append(frame_descriptor(state["keys"][n]))
        return store


def assemble_receptive_field(chunk_index: int, store: KVMemoryStore, W: int | None, k: int,
                             query: torch.Tensor | None = None, L: int | None = None,
                             policy: str = "camr") -> ReceptiveField:
    """Receptive field of ``chunk_index`` given everything ``store`` holds."""
    if L is None:
        if not store.frame_ids:
            raise ValueError("chunk length is needed when the store is empty")
        L = store.chunk_ids.count(store.chunk_ids[-1])
    return route(chunk_index, L, query, store.frame_ids, store.chunk_ids, store.descriptors,
                 RouterConfig(W=W, k=k, policy=policy))
