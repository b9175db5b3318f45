"""Streaming chunk-by-chunk generation with KV caching and routed memory."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from . import container
from .memory import KVMemoryStore, RouterConfig
from .model import VelocityTransformer
from .rope import routed_span
from .stream import LatentChunk, ShotSchedule, solver_sigmas


@dataclass(frozen=True)
class SessionConfig:
    W: int = 3
    k: int = 5
    L: int = 3
    steps: int = 4
    shift: float = 3.0
    policy: str = "camr"
    route_per_step: bool = False
    max_store_frames: int | None = None
    base_steps: int = 48
    seed: int = 0

    @property
    def router(self) -> RouterConfig:
        return RouterConfig(W=self.W, k=self.k, policy=self.policy)

    @property
    def span(self) -> int:
        return routed_span(self.router.effective_k, self.W, self.L)


class SessionError(RuntimeError):
    def __init__(self, message: str, last_good: bytes | None = None):
        super().__init__(message)
        self.last_good = last_good


class RolloutSession:
    """Generation state for one stream. Chunks and frames are indexed as in training."""

    def __init__(self, model: VelocityTransformer, config: SessionConfig, schedule: ShotSchedule):
        if schedule.L != config.L:
            raise ValueError(f"schedule uses L={schedule.L}, session L={config.L}")
        rope = model.config.rope
        if config.span > rope.f_train:
            raise ValueError(f"routed span {config.span} exceeds the training horizon {rope.f_train}")
        if config.max_store_frames is not None and config.max_store_frames < config.W * config.L:
            raise ValueError("max_store_frames must hold at least the local window")
        self.model = model
        self.config = config
        self.schedule = schedule
        self.stores = [KVMemoryStore(config.max_store_frames) for _ in range(model.config.layers)]
        self.cursor = 1
        self.rng = torch.Generator().manual_seed(config.seed)
        self.denoise_passes = 0
        self.write_passes = 0
        self.history_passes = 0  # forward passes whose queries belong to already-finished chunks
        self.passes_by_chunk: dict[int, int] = {}
        self.max_position = -1
        self.attended: list[int] = []
        self.fields_log: dict[int, list] = {}
        self.last_step_input: tuple[torch.Tensor, float] | None = None

    @property
    def cached_frames(self) -> int:
        return len(self.stores[0])

    @property
    def next_frame(self) -> int:
        return (self.cursor - 1) * self.config.L

    def append_shot(self, prompt: torch.Tensor, boundary_frame: int, seed: int | None = None,
                    cue: float | None = None) -> "RolloutSession":
        """Start a new shot at ``boundary_frame``; only chunks not yet generated are affected."""
        if boundary_frame % self.config.L:
            raise ValueError(f"boundary {boundary_frame} is not aligned to chunk length {self.config.L}")
        if boundary_frame < self.next_frame:
            raise ValueError(f"boundary {boundary_frame} lies before the next frame to generate ({self.next_frame})")
        last = self.schedule.boundaries[-1] if self.schedule.boundaries else 0
        if boundary_frame <= last:
            raise ValueError(f"boundary {boundary_frame} does not follow the last boundary {last}")
        self.schedule = self.schedule.appended(boundary_frame, prompt, seed, cue)
        return self

    def _count(self, chunk_index: int) -> None:
        if chunk_index < self.cursor:
            self.history_passes += 1
        self.passes_by_chunk[chunk_index] = self.passes_by_chunk.get(chunk_index, 0) + 1

    def _check_bounds(self, out) -> None:
        span = self.config.span
        if out.max_position >= span or out.max_position >= self.model.config.f_train:
            raise SessionError(f"rotary position {out.max_position} outside span {span}")
        if out.attended_frames > span:
            raise SessionError(f"attended {out.attended_frames} frames, bound is {span}")
        self.max_position = max(self.max_position, out.max_position)

    @torch.no_grad()
    def generate_chunk(self) -> LatentChunk:
        cfg, model = self.config, self.model
        i = self.cursor
        prompt = self.schedule.prompt_for_chunk(i)
        rng_before = self.rng.get_state()
        mc = model.config
        x = torch.randn(cfg.L, mc.channels, mc.grid_h, mc.grid_w, generator=self.rng).to(model.spatial.dtype)
        sigmas = solver_sigmas(cfg.steps, cfg.shift, cfg.base_steps).tolist()
        fields = None
        for j in range(cfg.steps):
            reuse = None if (cfg.route_per_step or fields is None) else fields
            self.last_step_input = (x, sigmas[j])
            out = model.forward_chunk(x, sigmas[j], prompt, i, self.stores, cfg.router, fields=reuse)
            fields = out.fields
            self.denoise_passes += 1
            self._count(i)
            self._check_bounds(out)
            x = x + (sigmas[j + 1] - sigmas[j]) * out.velocity
        if not torch.isfinite(x).all():
            self.rng.set_state(rng_before)
            raise SessionError(f"non-finite latents in chunk {i}", self.snapshot())
        out = model.forward_chunk(x, 0.0, prompt, i, self.stores, cfg.router, fields=fields, write=True)
        self.write_passes += 1
        self._count(i)
        self.attended.append(out.attended_frames)
        self.fields_log[i] = out.fields
        self.cursor += 1
        return LatentChunk(x, i)

    @torch.no_grad()
    def ingest_chunk(self, frames: torch.Tensor) -> LatentChunk:
        """Write a given clean chunk into the cache as the next chunk (context priming)."""
        if frames.shape[0] != self.config.L:
            raise ValueError(f"expected {self.config.L} frames, got {frames.shape[0]}")
        i = self.cursor
        frames = frames.to(self.model.spatial.dtype)
        out = self.model.forward_chunk(frames, 0.0, self.schedule.prompt_for_chunk(i), i, self.stores,
                                       self.config.router, write=True)
        self._check_bounds(out)
        self.write_passes += 1
        self._count(i)
        self.attended.append(out.attended_frames)
        self.fields_log[i] = out.fields
        self.cursor += 1
        return LatentChunk(frames, i)

    # -- snapshot / resume ---------------------------------------------------
    def snapshot(self) -> bytes:
        sched = self.schedule
        meta = {
            "config": asdict(self.config),
            "cursor": self.cursor,
            "schedule": {"L": sched.L, "boundaries": list(sched.boundaries),
                         "prompt_seeds": None if sched.prompt_seeds is None else list(sched.prompt_seeds),
                         "cues": None if sched.cues is None else list(sched.cues)},
            "counters": {"denoise": self.denoise_passes, "write": self.write_passes,
                         "history": self.history_passes, "max_position": self.max_position},
            "attended": self.attended,
            "passes_by_chunk": {str(c): n for c, n in self.passes_by_chunk.items()},
            "model_hash": container.parameter_hash(self.model),
            "stores": [],
        }
        tensors = {"prompts": sched.prompts, "rng": self.rng.get_state()}
        for li, store in enumerate(self.stores):
            st = store.state()
            meta["stores"].append({"frame_ids": st["frame_ids"], "chunk_ids": st["chunk_ids"]})
            if st["keys"] is not None:
                tensors[f"layer{li}.keys"] = st["keys"]
                tensors[f"layer{li}.values"] = st["values"]
        return container.dumps(container.SNAPSHOT_MAGIC, meta, tensors)

    @classmethod
    def resume(cls, blob: bytes, model: VelocityTransformer) -> "RolloutSession":
        meta, tensors = container.loads(blob, container.SNAPSHOT_MAGIC)
        try:
            if meta["model_hash"] != container.parameter_hash(model):
                raise container.ContainerError("snapshot was taken with different model parameters")
            cfg = SessionConfig(**meta["config"])
            s = meta["schedule"]
            sched = ShotSchedule(s["L"], tuple(s["boundaries"]), tensors["prompts"],
                                 None if s["prompt_seeds"] is None else tuple(s["prompt_seeds"]),
                                 None if s["cues"] is None else tuple(s["cues"]))
            session = cls(model, cfg, sched)
            session.cursor = int(meta["cursor"])
            session.rng.set_state(tensors["rng"])
            c = meta["counters"]
            session.denoise_passes, session.write_passes = c["denoise"], c["write"]
            session.history_passes, session.max_position = c["history"], c["max_position"]
            session.attended = list(meta["attended"])
            session.passes_by_chunk = {int(c): int(n) for c, n in meta["passes_by_chunk"].items()}
            stores = []
            for li, st in enumerate(meta["stores"]):
                state = {"frame_ids": st["frame_ids"], "chunk_ids": st["chunk_ids"],
                         "keys": tensors.get(f"layer{li}.keys"), "values": tensors.get(f"layer{li}.values")}
                stores.append(KVMemoryStore.from_state(state, cfg.max_store_frames))
        except (KeyError, TypeError) as exc:
            raise container.ContainerError(f"incomplete snapshot: {exc}") from exc
        if len(stores) != model.config.layers:
            raise container.ContainerError("snapshot layer count does not match the model")
        session.stores = stores
        return session


def start_session(model: VelocityTransformer, config: SessionConfig, first_prompt: torch.Tensor,
                  prompt_seed: int | None = None) -> RolloutSession:
    schedule = ShotSchedule.single(config.L, first_prompt, prompt_seed)
    return RolloutSession(model, config, schedule)
