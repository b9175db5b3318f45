"""Latent streams, chunking, shot schedules and the flow-matching noise process."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import torch


@dataclass(frozen=True)
class LatentChunk:
    """``L`` consecutive latent frames generated jointly, shape ``(L, C, H, W)``."""

    frames: torch.Tensor
    chunk_index: int  # 1-based

    def __post_init__(self):
        if self.frames.dim() != 4:
            raise ValueError(f"chunk frames must be (L, C, H, W), got {tuple(self.frames.shape)}")
        if self.chunk_index < 1:
            raise ValueError("chunk_index is 1-based")

    @property
    def first_frame(self) -> int:
        return (self.chunk_index - 1) * len(self)

    def __len__(self) -> int:
        return self.frames.shape[0]


def _as_frame_tensor(frames) -> torch.Tensor:
    if isinstance(frames, torch.Tensor):
        out = frames
    else:
        frames = list(frames)
        if not frames:
            raise ValueError("empty frame list")
        out = torch.stack(list(frames))
    if out.dim() != 4:
        raise ValueError(f"frames must stack to (F, C, H, W), got {tuple(out.shape)}")
    if not torch.isfinite(out).all():
        raise ValueError("latent frames contain non-finite values")
    return out


def chunk_sequence(frames, L: int) -> list[LatentChunk]:
    """Split a frame sequence into ``len(frames) // L`` chunks, order preserved.

    ``frames`` is either an ``(F, C, H, W)`` tensor or a sequence of ``(C, H, W)``
    frames. A length not divisible by ``L`` is rejected rather than padded.
    """
    if L < 1:
        raise ValueError(f"chunk length must be >= 1, got {L}")
    data = _as_frame_tensor(frames)
    if data.shape[0] % L:
        raise ValueError(f"{data.shape[0]} frames cannot be split into chunks of {L}")
    return [LatentChunk(data[j:j + L], j // L + 1) for j in range(0, data.shape[0], L)]


def flatten_chunks(chunks: Sequence[LatentChunk]) -> torch.Tensor:
    return torch.cat([c.frames for c in chunks], dim=0)


PROMPT_CUE_DIM = 8  # prompt coordinate reserved for the entity cue


def prompt_embedding(seed: int, dim: int = 16, cue: float = 0.0) -> torch.Tensor:
    """Deterministic prompt vector for ``seed``.

    Coordinates are i.i.d. standard normal drawn from a generator seeded with
    ``seed``; when ``dim`` leaves room, coordinate ``PROMPT_CUE_DIM`` is replaced
    by ``cue`` so scripted scenarios can flag entity reappearance.
    """
    g = torch.Generator().manual_seed(int(seed))
    vec = torch.randn(dim, generator=g)
    if dim > PROMPT_CUE_DIM:
        vec[PROMPT_CUE_DIM] = float(cue)
    return vec


@dataclass(frozen=True)
class ShotSchedule:
    """Shot boundaries (latent-frame indices) plus one prompt embedding per shot.

    Boundaries must be multiples of ``L`` so a chunk never straddles two shots.
    Shots and chunks are both 1-based.
    """

    L: int
    boundaries: tuple[int, ...]
    prompts: torch.Tensor  # (S, prompt_dim)
    prompt_seeds: tuple[int, ...] | None = None
    cues: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.prompts.dim() != 2:
            raise ValueError("prompts must be (S, prompt_dim)")
        prev = 0
        for b in self.boundaries:
            if b <= prev:
                raise ValueError(f"boundaries must be strictly increasing and > 0: {self.boundaries}")
            if b % self.L:
                raise ValueError(f"boundary {b} is not aligned to chunk length {self.L}")
            prev = b
        if len(self.boundaries) + 1 != self.prompts.shape[0]:
            raise ValueError(
                f"{len(self.boundaries)} boundaries need {len(self.boundaries) + 1} prompts, "
                f"got {self.prompts.shape[0]}"
            )

    @property
    def num_shots(self) -> int:
        return self.prompts.shape[0]

    def validate_length(self, total_frames: int) -> None:
        if self.boundaries and self.boundaries[-1] >= total_frames:
            raise ValueError(f"boundary {self.boundaries[-1]} is not inside {total_frames} frames")

    def shot_of_frame(self, frame: int) -> int:
        s = 1
        for b in self.boundaries:
            if frame >= b:
                s += 1
            else:
                break
        return s

    def shot_of_chunk(self, chunk_index: int) -> int:
        if chunk_index < 1:
            raise ValueError("chunk_index is 1-based")
        return self.shot_of_frame((chunk_index - 1) * self.L)

    def prompt_for_chunk(self, chunk_index: int) -> torch.Tensor:
        return self.prompts[self.shot_of_chunk(chunk_index) - 1]

    def shot_starts(self) -> list[int]:
        return [0, *self.boundaries]

    def appended(self, boundary: int, prompt: torch.Tensor, seed: int | None = None,
                 cue: float | None = None) -> "ShotSchedule":
        prompts = torch.cat([self.prompts, prompt.reshape(1, -1).to(self.prompts)], dim=0)
        seeds = None
        if self.prompt_seeds is not None and seed is not None:
            seeds = (*self.prompt_seeds, int(seed))
        cues = None
        if self.cues is not None and seeds is not None:
            cues = (*self.cues, float(cue or 0.0))
        return ShotSchedule(self.L, (*self.boundaries, int(boundary)), prompts, seeds, cues)

    @classmethod
    def single(cls, L: int, prompt: torch.Tensor, seed: int | None = None) -> "ShotSchedule":
        seeds = None if seed is None else (int(seed),)
        cues = None if seed is None else (0.0,)
        return cls(L, (), prompt.reshape(1, -1), seeds, cues)

    @classmethod
    def from_seeds(cls, L: int, boundaries: Sequence[int], seeds: Sequence[int],
                   prompt_dim: int = 16, cues: Sequence[float] | None = None) -> "ShotSchedule":
        cues = [0.0] * len(seeds) if cues is None else list(cues)
        if len(cues) != len(seeds):
            raise ValueError("one cue per prompt seed")
        prompts = torch.stack([prompt_embedding(s, prompt_dim, c) for s, c in zip(seeds, cues)])
        return cls(L, tuple(boundaries), prompts, tuple(int(s) for s in seeds),
                   tuple(float(c) for c in cues))

    def to_json(self) -> dict:
        if self.prompt_seeds is None:
            raise ValueError("schedule has no prompt seeds; it cannot be serialized")
        doc = {"L": self.L, "boundaries": list(self.boundaries), "prompt_seeds": list(self.prompt_seeds)}
        if self.cues is not None and any(self.cues):
            doc["cues"] = list(self.cues)
        return doc

    @classmethod
    def from_json(cls, doc: dict | str, prompt_dim: int = 16) -> "ShotSchedule":
        if isinstance(doc, str):
            doc = json.loads(doc)
        try:
            L, boundaries, seeds = int(doc["L"]), doc["boundaries"], doc["prompt_seeds"]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed shot schedule document: {exc}") from exc
        return cls.from_seeds(L, boundaries, seeds, prompt_dim, doc.get("cues"))


def shot_of_chunk(chunk_index: int, schedule: ShotSchedule, L: int) -> int:
    if L != schedule.L:
        raise ValueError(f"schedule was built for L={schedule.L}, asked with L={L}")
    return schedule.shot_of_chunk(chunk_index)


def flow_interpolate(x0: torch.Tensor, eps: torch.Tensor, sigma) -> torch.Tensor:
    """Point on the straight noise path: ``(1 - sigma) * x0 + sigma * eps``."""
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    return (1 - sigma) * x0 + sigma * eps


@dataclass(frozen=True)
class NoiseConfig:
    shift: float = 3.0
    sigma_min: float = 1e-3
    sigma_max: float = 1.0 - 1e-3
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.sigma_min <= self.sigma_max <= 1.0:
            raise ValueError("need 0 <= sigma_min <= sigma_max <= 1")
        if self.shift <= 0:
            raise ValueError("shift must be positive")

    def generator(self) -> torch.Generator:
        return torch.Generator().manual_seed(self.rng_seed)


def shift_sigma(u, shift: float):
    """Shifted schedule ``shift*u / (1 + (shift-1)*u)``; identity when ``shift == 1``."""
    return shift * u / (1 + (shift - 1) * u)


def sample_sigma(config: NoiseConfig, rng: torch.Generator) -> float:
    u = torch.rand((), generator=rng, dtype=torch.float64).item()
    u = config.sigma_min + (config.sigma_max - config.sigma_min) * u
    return float(shift_sigma(u, config.shift))


def solver_sigmas(steps: int, shift: float = 3.0, base_steps: int = 48) -> torch.Tensor:
    """Decreasing sigma grid from 1 to 0 with ``steps`` Euler intervals.

    When ``steps`` divides ``base_steps`` the grid is a subsequence of the
    ``base_steps`` grid, so few-step students share timesteps with the teacher.
    """
    if steps < 1:
        raise ValueError("need at least one step")
    if base_steps % steps == 0:
        u = torch.linspace(1.0, 0.0, base_steps + 1, dtype=torch.float64)[:: base_steps // steps]
    else:
        u = torch.linspace(1.0, 0.0, steps + 1, dtype=torch.float64)
    return shift_sigma(u, shift)


def subsample_indices(base_steps: int = 48, keep: int = 4) -> list[int]:
    """Indices of the ``keep`` noisy states retained from a ``base_steps`` solver."""
    if base_steps % keep:
        raise ValueError(f"{keep} does not divide {base_steps}")
    stride = base_steps // keep
    return list(range(0, base_steps, stride))


def sinusoidal_embedding(values: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = values.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb
