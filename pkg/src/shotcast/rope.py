"""Rotary embeddings over the temporal axis and block-relative re-anchoring."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int = 16
    base: float = 10000.0
    f_train: int = 61  # largest temporal position seen in training, exclusive

    def __post_init__(self):
        if self.head_dim % 2:
            raise ValueError(f"rotary head_dim must be even, got {self.head_dim}")

    def check_span(self, k: int, W: int, L: int) -> int:
        span = routed_span(k, W, L)
        if span > self.f_train:
            raise ValueError(f"routed span k+(W+1)L = {span} exceeds the training horizon {self.f_train}")
        return span


def routed_span(k: int, W: int, L: int) -> int:
    return k + (W + 1) * L


def inv_frequencies(head_dim: int, base: float) -> torch.Tensor:
    return base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)


def rotate(x: torch.Tensor, positions: torch.Tensor, config: RopeConfig | None = None) -> torch.Tensor:
    """Rotate adjacent pairs ``(x[2j], x[2j+1])`` by ``position * base**(-2j/D)``.

    ``x`` has shape ``(..., H, D)``; ``positions`` is an integer tensor whose
    shape equals ``x.shape[:-2]`` (one position per token, shared by heads).
    """
    config = config or RopeConfig(head_dim=x.shape[-1])
    D = x.shape[-1]
    if D % 2:
        raise ValueError(f"rotary head_dim must be even, got {D}")
    positions = torch.as_tensor(positions)
    if positions.shape != x.shape[:-2]:
        raise ValueError(f"positions {tuple(positions.shape)} do not match tokens {tuple(x.shape[:-2])}")
    if (positions < 0).any():
        raise ValueError("rotary positions must be non-negative")
    angles = positions.to(torch.float64)[..., None] * inv_frequencies(D, config.base)
    cos = torch.cos(angles).to(x.dtype).unsqueeze(-2)
    sin = torch.sin(angles).to(x.dtype).unsqueeze(-2)
    even, odd = x[..., 0::2], x[..., 1::2]
    return torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1).flatten(-2)


def block_relative_positions(k_sel: int, W: int, L: int) -> list[int]:
    """Compact positions for ``[memory | window | current]`` frames.

    ``k_sel`` memory frames take ``0..k_sel-1``, the ``W*L`` window frames follow,
    and the current chunk occupies the last ``L`` slots. Fewer than ``k``
    retrieved frames simply shift everything down; there are no holes.
    """
    if k_sel < 0 or W < 0 or L < 1:
        raise ValueError(f"invalid block layout k_sel={k_sel}, W={W}, L={L}")
    return list(range(k_sel + (W + 1) * L))
