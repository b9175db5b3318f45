"""Slow, obviously-correct reference implementations used by ``verify`` and the tests."""

from __future__ import annotations

import numpy as np
import torch


def enumerate_visibility(N: int, L: int, routing: dict[int, set[int]] | None = None) -> torch.Tensor:
    """Packed visibility decided pair by pair from the quadrant rules.

    Rows/cols are packed frames; frames ``< N*L`` are clean, the rest noisy.
    ``routing`` optionally restricts the history frames of chunk ``i``.
    """
    NL = N * L
    m = torch.zeros(2 * NL, 2 * NL, dtype=torch.bool)
    for q in range(2 * NL):
        q_noisy = q >= NL
        qi = (q % NL) // L + 1
        for k in range(2 * NL):
            k_noisy = k >= NL
            ki = (k % NL) // L + 1
            allowed_hist = routing is None or qi not in routing or (k % NL) in routing[qi]
            if not q_noisy and not k_noisy:
                ok = ki == qi or (ki < qi and allowed_hist)
            elif q_noisy and not k_noisy:
                ok = ki < qi and allowed_hist
            elif q_noisy and k_noisy:
                ok = ki == qi
            else:
                ok = False
            m[q, k] = ok
    return m


def topk_by_sort(frames, scores, k: int) -> list[int]:
    """Full sort on (-score, frame), take ``k``, return ascending."""
    pairs = sorted(zip(frames, scores), key=lambda p: (-p[1], p[0]))
    return sorted(int(f) for f, _ in pairs[:k])


def loop_mean_descriptor(keys: torch.Tensor) -> torch.Tensor:
    """Mean of ``(P, H, D)`` keys over P with an explicit accumulation loop."""
    acc = torch.zeros(keys.shape[1:], dtype=torch.float64)
    for p in range(keys.shape[0]):
        acc += keys[p].double()
    return acc / keys.shape[0]


def straight_path_velocity(x0: torch.Tensor):
    """Exact velocity field of the straight path ending at ``x0``: ``v(x, s) = (x - x0) / s``."""

    def velocity(x: torch.Tensor, sigma: float) -> torch.Tensor:
        return (x - x0) / sigma

    return velocity


def central_difference(f, params: list[torch.Tensor], coords: list[tuple[int, tuple]], h: float = 1e-6):
    """Central finite differences of scalar ``f()`` at selected ``(param, index)`` coordinates."""
    out = []
    for pi, idx in coords:
        p = params[pi]
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + h
            fp = float(f())
            p[idx] = old - h
            fm = float(f())
            p[idx] = old
        out.append((fp - fm) / (2 * h))
    return np.asarray(out)


def random_coords(params: list[torch.Tensor], n: int, rng: np.random.Generator) -> list[tuple[int, tuple]]:
    coords = []
    for _ in range(n):
        pi = int(rng.integers(len(params)))
        idx = tuple(int(rng.integers(s)) for s in params[pi].shape)
        coords.append((pi, idx))
    return coords
