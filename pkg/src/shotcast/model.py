"""Toy velocity-field transformer with packed teacher forcing and KV-cached streaming.

Tokens are the ``P = H*W`` spatial sites of each latent frame. Each block runs
self-attention (rotary over the temporal axis only), cross-attention to the
active shot prompt, then an MLP, all pre-norm.

Self-attention is evaluated group by group: a group is one chunk's query
frames together with the key frames it may see, ordered temporally with the
chunk itself last. Rotary positions are the rank within that list, so a routed
field ``[memory | window | current]`` lands on the block-relative layout and an
unrouted causal history lands on global frame indices. The packed training
forward and the streaming forward build the same groups, which is why their
outputs agree.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .masks import VisibilityMask, build_tf_mask, cross_routing_frames
from .memory import KVMemoryStore, ReceptiveField, RouterConfig, route
from .rope import RopeConfig, rotate
from .stream import ShotSchedule, flow_interpolate, sinusoidal_embedding


@dataclass
class ModelConfig:
    channels: int = 8
    grid_h: int = 8
    grid_w: int = 8
    layers: int = 4
    heads: int = 4
    head_dim: int = 16
    prompt_dim: int = 16
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    f_train: int = 61
    seed: int = 0
    feature_layer: int | None = None

    def __post_init__(self):
        for name in ("channels", "grid_h", "grid_w", "layers", "heads", "head_dim", "prompt_dim", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        RopeConfig(self.head_dim, self.rope_base, self.f_train)

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(self.head_dim, self.rope_base, self.f_train)

    @property
    def mid_layer(self) -> int:
        return self.layers // 2 if self.feature_layer is None else self.feature_layer

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class AttentionPlan:
    """Gather indices for grouped self-attention (see module docstring)."""

    query_frames: torch.Tensor  # (G, Lq) rows into the query frame pool
    query_pos: torch.Tensor     # (G, Lq)
    key_frames: torch.Tensor    # (G, Fmax) rows into the key frame pool
    key_pos: torch.Tensor       # (G, Fmax)
    key_valid: torch.Tensor     # (G, Fmax) bool

    @property
    def max_position(self) -> int:
        return int(torch.where(self.key_valid, self.key_pos, torch.zeros_like(self.key_pos)).max())

    @classmethod
    def from_groups(cls, groups: Sequence[tuple[Sequence[int], Sequence[int]]]) -> "AttentionPlan":
        """``groups`` holds ``(query_frames, visible_key_frames)`` with keys in temporal order."""
        fmax = max(len(keys) for _, keys in groups)
        lq = len(groups[0][0])
        G = len(groups)
        qf = torch.zeros(G, lq, dtype=torch.long)
        qp = torch.zeros(G, lq, dtype=torch.long)
        kf = torch.zeros(G, fmax, dtype=torch.long)
        kp = torch.zeros(G, fmax, dtype=torch.long)
        kv = torch.zeros(G, fmax, dtype=torch.bool)
        for g, (queries, keys) in enumerate(groups):
            rank = {f: r for r, f in enumerate(keys)}
            qf[g] = torch.as_tensor(list(queries))
            qp[g] = torch.as_tensor([rank[f] for f in queries])
            n = len(keys)
            kf[g, :n] = torch.as_tensor(list(keys))
            kp[g, :n] = torch.arange(n)
            kv[g, :n] = True
        return cls(qf, qp, kf, kp, kv)


def plan_from_mask(mask: VisibilityMask) -> AttentionPlan:
    lay = mask.layout
    groups = []
    for seg in range(1, 2 * lay.N + 1):
        rows = list(lay.segment_frames(seg))
        row = mask.matrix[rows[0]]
        if not all(torch.equal(mask.matrix[r], row) for r in rows[1:]):
            raise ValueError(f"frames of segment {seg} disagree on visibility")
        keys = torch.nonzero(row).flatten().tolist()
        if not set(rows) <= set(keys):
            raise ValueError(f"segment {seg} cannot see itself")
        groups.append((rows, keys))
    return AttentionPlan.from_groups(groups)


@dataclass
class PackedOutput:
    velocity: torch.Tensor                   # (N*L, C, H, W) for the noisy half
    fields: list[list[ReceptiveField]] | None  # per layer, per chunk
    features: torch.Tensor | None = None       # (N*L, P, width) noisy-half hidden states
    max_position: int = 0


@dataclass
class StepOutput:
    velocity: torch.Tensor          # (L, C, H, W)
    fields: list[ReceptiveField]    # per layer
    max_position: int
    attended_frames: int
    keys: list[torch.Tensor] = field(default_factory=list)
    values: list[torch.Tensor] = field(default_factory=list)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.width
        self.heads, self.head_dim = cfg.heads, cfg.head_dim
        self.norm1 = nn.LayerNorm(w)
        self.qkv = nn.Linear(w, 3 * w)
        self.proj = nn.Linear(w, w)
        self.norm2 = nn.LayerNorm(w)
        self.cross_q = nn.Linear(w, w)
        self.cross_kv = nn.Linear(cfg.prompt_dim, 2 * w)
        self.cross_proj = nn.Linear(w, w)
        self.norm3 = nn.LayerNorm(w)
        self.mlp = nn.Sequential(nn.Linear(w, cfg.mlp_ratio * w), nn.GELU(), nn.Linear(cfg.mlp_ratio * w, w))

    def qkv_heads(self, x: torch.Tensor):
        F_, P, _ = x.shape
        q, k, v = self.qkv(self.norm1(x)).view(F_, P, 3, self.heads, self.head_dim).unbind(2)
        return q, k, v

    def cross(self, x: torch.Tensor, prompts: torch.Tensor, prompt_idx: torch.Tensor) -> torch.Tensor:
        F_, P, w = x.shape
        S, T, _ = prompts.shape
        q = self.cross_q(self.norm2(x)).view(F_, P, self.heads, self.head_dim)
        kv = self.cross_kv(prompts).view(S, T, 2, self.heads, self.head_dim)
        kc, vc = kv[prompt_idx].unbind(2)  # (F, T, H, D)
        logits = torch.einsum("fphd,fthd->fhpt", q, kc) / math.sqrt(self.head_dim)
        out = torch.einsum("fhpt,fthd->fphd", logits.softmax(-1), vc)
        return self.cross_proj(out.reshape(F_, P, w))


def grouped_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, plan: AttentionPlan,
                      rope: RopeConfig) -> torch.Tensor:
    """Attention of each group's query frames over its own rotated key frames.

    ``q`` is the query frame pool ``(Fq, P, H, D)``; ``k``/``v`` the key pool.
    Keys are rotated per group because the same frame can sit at different
    relative positions in different groups. Padding slots get ``-inf`` logits.
    Returns ``(Fq, P, H*D)``; query frames not in any group are zero.
    """
    G, lq = plan.query_frames.shape
    fmax = plan.key_frames.shape[1]
    _, P, H, D = q.shape
    qg = rotate(q[plan.query_frames], plan.query_pos[..., None].expand(G, lq, P), rope)
    kg = rotate(k[plan.key_frames], plan.key_pos[..., None].expand(G, fmax, P), rope)
    vg = v[plan.key_frames]
    qg = qg.reshape(G, lq * P, H, D)
    kg = kg.reshape(G, fmax * P, H, D)
    vg = vg.reshape(G, fmax * P, H, D)
    logits = torch.einsum("gqhd,gkhd->ghqk", qg, kg) / math.sqrt(D)
    bias = torch.zeros(G, fmax, dtype=q.dtype).masked_fill(~plan.key_valid, float("-inf"))
    logits = logits + bias.repeat_interleave(P, dim=1)[:, None, None, :]
    out = torch.einsum("ghqk,gkhd->gqhd", logits.softmax(-1), vg).reshape(G * lq, P, H * D)
    pool = torch.zeros(q.shape[0], P, H * D, dtype=out.dtype)
    return pool.index_copy(0, plan.query_frames.reshape(-1), out)


def _as_prompt_tokens(prompts: torch.Tensor) -> torch.Tensor:
    return prompts[:, None, :] if prompts.dim() == 2 else prompts


class VelocityTransformer(nn.Module):
    """Predicts the flow velocity ``eps - x0`` for noisy latent chunks."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        cfg = config
        w = cfg.width
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.embed = nn.Linear(cfg.channels, w)
            self.spatial = nn.Parameter(0.1 * torch.randn(cfg.tokens_per_frame, w))
            self.time_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
            self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
            self.norm_out = nn.LayerNorm(w)
            self.head = nn.Linear(w, cfg.channels)

    # -- token plumbing -------------------------------------------------
    def _tokens(self, frames: torch.Tensor, sigmas: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        n = frames.shape[0]
        if tuple(frames.shape[1:]) != (cfg.channels, cfg.grid_h, cfg.grid_w):
            raise ValueError(f"frames {tuple(frames.shape[1:])} do not match the model latent shape")
        dtype = self.spatial.dtype
        tok = frames.to(dtype).reshape(n, cfg.channels, -1).transpose(1, 2)
        temb = sinusoidal_embedding(sigmas * 1000.0, cfg.width).to(dtype)
        return self.embed(tok) + self.spatial + self.time_mlp(temb)[:, None, :]

    def _velocity(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        out = self.head(self.norm_out(x))
        return out.transpose(1, 2).reshape(x.shape[0], cfg.channels, cfg.grid_h, cfg.grid_w)

    # -- packed teacher forcing -----------------------------------------
    def forward_packed(self, clean: torch.Tensor, noisy: torch.Tensor, sigma, prompts: torch.Tensor,
                       prompt_index: torch.Tensor, L: int, routing=None,
                       return_features: bool = False) -> PackedOutput:
        """Forward over ``[clean_1..clean_N, noisy_1..noisy_N]`` in one pass.

        ``prompt_index`` gives the 0-based prompt of each chunk. ``routing`` is
        ``None`` (full causal history), a :class:`RouterConfig` (content routing
        computed per layer from that layer's queries and keys), a list of
        per-chunk :class:`ReceptiveField` shared by all layers, a list of such
        lists (one per layer), or a :class:`VisibilityMask` (or one per layer).
        """
        cfg = self.config
        if clean.shape != noisy.shape:
            raise ValueError("clean and noisy halves must have the same shape")
        NL = clean.shape[0]
        if NL % L:
            raise ValueError(f"{NL} frames is not a whole number of chunks of {L}")
        N = NL // L
        prompt_index = torch.as_tensor(prompt_index, dtype=torch.long)
        if prompt_index.shape != (N,):
            raise ValueError(f"need one prompt index per chunk ({N}), got {tuple(prompt_index.shape)}")
        prompts = _as_prompt_tokens(prompts.to(self.spatial.dtype))
        frame_prompt = prompt_index.repeat_interleave(L).repeat(2)
        sig = torch.cat([torch.zeros(NL, dtype=torch.float64),
                         torch.full((NL,), float(sigma), dtype=torch.float64)])
        x = self._tokens(torch.cat([clean, noisy]), sig)

        router = routing if isinstance(routing, RouterConfig) else None
        fixed_plans = self._fixed_plans(routing, N, L) if router is None else None
        all_fields = [] if router is not None else None
        features = None
        max_pos = 0
        for li, blk in enumerate(self.blocks):
            q, k, v = blk.qkv_heads(x)
            if router is not None:
                fields = self._route_packed(q, k, N, L, router)
                all_fields.append(fields)
                plan = plan_from_mask(build_tf_mask(N, L, fields, router.route_clean))
            else:
                plan = fixed_plans[li]
            max_pos = max(max_pos, plan.max_position)
            x = x + blk.proj(grouped_attention(q, k, v, plan, cfg.rope))
            x = x + blk.cross(x, prompts, frame_prompt)
            x = x + blk.mlp(blk.norm3(x))
            if return_features and li == cfg.mid_layer:
                features = x[NL:]
        return PackedOutput(self._velocity(x[NL:]), all_fields, features, max_pos)

    def _fixed_plans(self, routing, N: int, L: int) -> list[AttentionPlan]:
        n_layers = self.config.layers
        if routing is None:
            masks = [build_tf_mask(N, L)] * n_layers
        elif isinstance(routing, VisibilityMask):
            masks = [routing] * n_layers
        elif isinstance(routing, (list, tuple)) and routing and isinstance(routing[0], VisibilityMask):
            masks = list(routing)
        elif isinstance(routing, (list, tuple)) and routing and isinstance(routing[0], (list, tuple)):
            masks = [build_tf_mask(N, L, f) for f in routing]
        else:
            masks = [build_tf_mask(N, L, routing)] * n_layers
        if len(masks) != n_layers:
            raise ValueError(f"need one mask per layer ({n_layers}), got {len(masks)}")
        for m in masks:
            if (m.layout.N, m.layout.L) != (N, L):
                raise ValueError(f"mask built for N={m.layout.N}, L={m.layout.L}; batch has N={N}, L={L}")
        cache: dict[int, AttentionPlan] = {}
        return [cache.setdefault(id(m), plan_from_mask(m)) for m in masks]

    @staticmethod
    def _route_packed(q, k, N: int, L: int, router: RouterConfig) -> list[ReceptiveField]:
        NL = N * L
        with torch.no_grad():
            qd = q[NL:].reshape(N, L, *q.shape[1:]).mean(dim=(1, 2))
            kd = k[:NL].mean(dim=1)
        chunk_ids = [f // L + 1 for f in range(NL)]
        fields = []
        for i in range(1, N + 1):
            h = (i - 1) * L
            fields.append(route(i, L, qd[i - 1], range(h), chunk_ids[:h], kd[:h], router))
        return fields

    # -- streaming --------------------------------------------------------
    def forward_chunk(self, x: torch.Tensor, sigma, prompt: torch.Tensor, chunk_index: int,
                      stores: Sequence[KVMemoryStore] | None = None, router: RouterConfig | None = None,
                      fields: Sequence[ReceptiveField] | None = None, write: bool = False) -> StepOutput:
        """Velocity for one chunk given the per-layer KV stores of its history.

        Routing is recomputed per layer from the chunk's own queries unless
        ``fields`` (one per layer) is given. With ``write`` the chunk's
        unrotated keys/values are appended to every store afterwards.
        """
        cfg = self.config
        L = x.shape[0]
        if stores is None:
            stores = [KVMemoryStore() for _ in range(cfg.layers)]
        if len(stores) != cfg.layers:
            raise ValueError(f"need one store per layer ({cfg.layers})")
        if fields is not None and len(fields) != cfg.layers:
            raise ValueError(f"need one receptive field per layer ({cfg.layers})")
        router = router or RouterConfig(W=None, k=0, policy="none")
        prompts = _as_prompt_tokens(prompt.reshape(1, -1) if prompt.dim() == 1 else prompt[None])
        prompts = prompts.to(self.spatial.dtype)
        h = self._tokens(x, torch.full((L,), float(sigma), dtype=torch.float64))
        zero = torch.zeros(L, dtype=torch.long)
        used, keys, values = [], [], []
        max_pos = attended = 0
        for li, blk in enumerate(self.blocks):
            q, k, v = blk.qkv_heads(h)
            store = stores[li]
            if fields is not None:
                f = fields[li]
            else:
                with torch.no_grad():
                    qd = q.mean(dim=(0, 1))
                f = route(chunk_index, L, qd, store.frame_ids, store.chunk_ids, store.descriptors, router)
            used.append(f)
            hist = list(f.history_frames)
            if hist:
                hk, hv = store.gather(hist)
                kpool, vpool = torch.cat([hk.to(k), k]), torch.cat([hv.to(v), v])
            else:
                kpool, vpool = k, v
            n = len(hist) + L
            plan = AttentionPlan.from_groups([(range(len(hist), n), range(n))])
            plan.query_frames = torch.arange(L)[None]
            max_pos = max(max_pos, n - 1)
            attended = max(attended, n)
            h = h + blk.proj(grouped_attention(q, kpool, vpool, plan, cfg.rope))
            h = h + blk.cross(h, prompts, zero)
            h = h + blk.mlp(blk.norm3(h))
            keys.append(k)
            values.append(v)
        if write:
            for store, k, v in zip(stores, keys, values):
                store.append_chunk(chunk_index, k, v)
        return StepOutput(self._velocity(h), used, max_pos, attended, keys, values)


# -- losses -------------------------------------------------------------------

def fm_loss(pred: torch.Tensor, x0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean-squared flow-matching error against the velocity target ``eps - x0``."""
    if not pred.shape == x0.shape == eps.shape:
        raise ValueError("prediction, data and noise must share a shape")
    return ((pred - (eps - x0)) ** 2).mean()


def x0_from_velocity(x_t: torch.Tensor, v: torch.Tensor, sigma) -> torch.Tensor:
    """Invert the straight path: ``x0 = x_t - sigma * v``."""
    return x_t - sigma * v


@dataclass
class PackedBatch:
    clean: torch.Tensor        # (N*L, C, H, W) ground-truth chunks
    eps: torch.Tensor          # same shape
    sigma: float               # one timestep shared by every noisy chunk
    prompts: torch.Tensor      # (S, prompt_dim)
    prompt_index: torch.Tensor  # (N,) 0-based shot per chunk
    L: int
    routing: object = None

    @property
    def N(self) -> int:
        return self.clean.shape[0] // self.L

    @property
    def noisy(self) -> torch.Tensor:
        return flow_interpolate(self.clean, self.eps, self.sigma)

    @property
    def target(self) -> torch.Tensor:
        return self.eps - self.clean

    @classmethod
    def build(cls, frames: torch.Tensor, schedule: ShotSchedule, sigma: float, eps: torch.Tensor,
              routing=None) -> "PackedBatch":
        L = schedule.L
        N = frames.shape[0] // L
        schedule.validate_length(frames.shape[0])
        idx = cross_routing_frames(N, L, schedule)[: N * L: L]
        return cls(frames, eps, float(sigma), schedule.prompts, idx, L, routing)


def packed_forward(model: VelocityTransformer, batch: PackedBatch, **kw) -> PackedOutput:
    return model.forward_packed(batch.clean, batch.noisy, batch.sigma, batch.prompts,
                                batch.prompt_index, batch.L, batch.routing, **kw)


def tf_loss(batch: PackedBatch, model: VelocityTransformer) -> torch.Tensor:
    """Flow-matching loss on the noisy half of the packed layout, averaged over chunks."""
    out = packed_forward(model, batch)
    return fm_loss(out.velocity, batch.clean.to(out.velocity), batch.eps.to(out.velocity))
