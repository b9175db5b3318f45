"""Procedural multi-shot latent sequences with recurring entities.

Each shot's background is decoded from its prompt: the first ``atoms``
coordinates of the prompt embedding weight a fixed global dictionary of
spatial-channel atoms, plus a slow sinusoidal drift. Entities come from a
fixed bank of identities, each with its own patch (carrying a shared channel
signature) and placement; with ``entity_bank=0`` every scenario draws a fresh
random patch and placement instead. An entity is pasted in the first shot
(entering at a random chunk) and again throughout the last shot, with nothing
in between. The prompt cue coordinate is set for
shots where the entity is on screen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..stream import ShotSchedule, prompt_embedding
from .metrics import shotcut_proxy


@dataclass(frozen=True)
class ScenarioSpec:
    channels: int = 4
    grid_h: int = 4
    grid_w: int = 4
    L: int = 3
    shot_chunks: tuple[int, ...] = (4, 1, 1, 1, 3)
    entities: int = 1
    entity_size: int = 2
    entity_bank: int = 8
    atoms: int = 8
    drift: float = 0.1
    marker: float = 1.5
    prompt_dim: int = 16
    cut_margin: float = 1.5

    def __post_init__(self):
        if self.entities and len(self.shot_chunks) < 2:
            raise ValueError("entities recur in the first and last shot; need at least two shots")
        if self.entities and self.shot_chunks[0] < 2:
            raise ValueError("the first shot needs at least two chunks so entities can enter")
        if self.atoms >= self.prompt_dim:
            raise ValueError("prompt must be wider than the background dictionary")

    @property
    def total_frames(self) -> int:
        return sum(self.shot_chunks) * self.L

    @property
    def num_chunks(self) -> int:
        return sum(self.shot_chunks)


@dataclass
class EntityRecord:
    patch: torch.Tensor            # (C, e, e)
    top: int
    left: int
    frames: list[int] = field(default_factory=list)  # global frame indices where the entity is visible
    shots: list[int] = field(default_factory=list)

    def region(self, frames: torch.Tensor) -> torch.Tensor:
        e = self.patch.shape[-1]
        return frames[..., self.top:self.top + e, self.left:self.left + e]


@dataclass
class Scenario:
    frames: torch.Tensor       # (F, C, H, W)
    schedule: ShotSchedule
    records: list[EntityRecord]
    spec: ScenarioSpec

    def chunk(self, i: int) -> torch.Tensor:
        L = self.spec.L
        return self.frames[(i - 1) * L: i * L]


_DICT_SEED = 90210


def atom_dictionary(spec: ScenarioSpec) -> torch.Tensor:
    """``(atoms + 1, C, H, W)`` unit-RMS atoms; the last one drives temporal drift."""
    g = torch.Generator().manual_seed(_DICT_SEED)
    a = torch.randn(spec.atoms + 1, spec.channels, spec.grid_h, spec.grid_w, generator=g)
    return a / a.pow(2).mean(dim=(1, 2, 3), keepdim=True).sqrt()


def entity_signature(channels: int, marker: float) -> torch.Tensor:
    return marker * torch.tensor([(-1.0) ** c for c in range(channels)])


def entity_bank(spec: ScenarioSpec) -> list[tuple[torch.Tensor, int, int]]:
    """``(patch, top, left)`` for each identity in the fixed bank."""
    g = np.random.default_rng(_DICT_SEED + 1)
    sig = entity_signature(spec.channels, spec.marker)
    e = spec.entity_size
    bank = []
    for _ in range(spec.entity_bank):
        patch = torch.from_numpy(g.standard_normal((spec.channels, e, e))).float() + sig[:, None, None]
        bank.append((patch, int(g.integers(0, spec.grid_h - e + 1)), int(g.integers(0, spec.grid_w - e + 1))))
    return bank


def background(spec: ScenarioSpec, prompt: torch.Tensor, t: int, atoms: torch.Tensor | None = None) -> torch.Tensor:
    atoms = atom_dictionary(spec) if atoms is None else atoms
    coeff = prompt[: spec.atoms] / math.sqrt(spec.atoms)
    bg = torch.einsum("m,mchw->chw", coeff, atoms[: spec.atoms])
    phase = float(prompt[spec.atoms + 1]) if spec.prompt_dim > spec.atoms + 1 else 0.0
    return bg + spec.drift * math.sin(0.5 * t + phase) * atoms[spec.atoms]


def _render(spec: ScenarioSpec, seeds, cues, entity_plan, atoms) -> tuple[torch.Tensor, ShotSchedule]:
    L = spec.L
    starts = np.cumsum((0,) + tuple(spec.shot_chunks))[:-1] * L
    schedule = ShotSchedule.from_seeds(L, [int(s) for s in starts[1:]], seeds, spec.prompt_dim, cues)
    frames = torch.empty(spec.total_frames, spec.channels, spec.grid_h, spec.grid_w)
    for f in range(spec.total_frames):
        s = schedule.shot_of_frame(f)
        frames[f] = background(spec, schedule.prompts[s - 1], f - int(starts[s - 1]), atoms)
    for rec in entity_plan:
        e = rec.patch.shape[-1]
        for f in rec.frames:
            frames[f, :, rec.top:rec.top + e, rec.left:rec.left + e] = rec.patch
    return frames, schedule


def gen_scenario(spec: ScenarioSpec, rng: np.random.Generator | int) -> Scenario:
    """Deterministic scenario for the given settings and seed.

    Prompt seeds are redrawn until every shot boundary is a clear statistics
    jump (the ground-truth shot-cut proxy is 1.0 with ``cut_margin`` to spare).
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    atoms = atom_dictionary(spec)
    S = len(spec.shot_chunks)
    L = spec.L
    starts = np.cumsum((0,) + tuple(spec.shot_chunks)) * L
    sig = entity_signature(spec.channels, spec.marker)
    e = spec.entity_size
    bank = entity_bank(spec)
    cues = [0.0] * S
    if spec.entities:
        cues[0] = cues[S - 1] = 1.0
    for _ in range(100):
        # An unlucky entity draw can make its own entry the largest jump in shot 1;
        # redraw everything after a bounded number of prompt attempts.
        records = []
        for _ in range(spec.entities):
            if bank:
                patch, top, left = bank[int(rng.integers(len(bank)))]
            else:
                patch = torch.from_numpy(rng.standard_normal((spec.channels, e, e))).float() + sig[:, None, None]
                top = int(rng.integers(0, spec.grid_h - e + 1))
                left = int(rng.integers(0, spec.grid_w - e + 1))
            entry = int(rng.integers(1, spec.shot_chunks[0])) * L
            frames = list(range(entry, int(starts[1]))) + list(range(int(starts[S - 1]), int(starts[S])))
            records.append(EntityRecord(patch, top, left, frames, [1, S]))
        for _ in range(50):
            seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=S)]
            frames, schedule = _render(spec, seeds, cues, records, atoms)
            if S < 2 or _cut_margin_ok(frames, schedule, spec):
                return Scenario(frames, schedule, records, spec)
    raise RuntimeError("could not draw prompts with separable shot cuts")


def _cut_margin_ok(frames: torch.Tensor, schedule: ShotSchedule, spec: ScenarioSpec) -> bool:
    from .metrics import chunk_jumps

    jumps, is_cut = chunk_jumps(frames, schedule)
    if not is_cut.any():
        return True
    within = jumps[~is_cut]
    ceiling = float(within.max()) if within.size else 0.0
    return float(jumps[is_cut].min()) > spec.cut_margin * ceiling and shotcut_proxy(frames, schedule) == 1.0
