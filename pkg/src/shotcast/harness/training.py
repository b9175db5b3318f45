"""Teacher-forcing training loop over synthetic scenarios."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from ..memory import RouterConfig
from ..model import PackedBatch, VelocityTransformer, tf_loss
from ..stream import NoiseConfig, sample_sigma
from .scenario import ScenarioSpec, gen_scenario

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    iters: int = 8000
    lr: float = 2e-3
    warmup: int = 50
    dense_iters: int = 6000  # leading iterations with full causal history, before routing kicks in
    clip: float = 1.0
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 100


def train_tf(model: VelocityTransformer, spec: ScenarioSpec, router: RouterConfig | None,
             cfg: TrainConfig, noise: NoiseConfig | None = None,
             on_log: Callable[[dict], None] | None = None) -> list[float]:
    """Optimize the packed teacher-forcing loss; returns the per-iteration loss."""
    noise = noise or NoiseConfig(rng_seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    trng = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda it: min(1.0, (it + 1) / max(1, cfg.warmup)) * 0.5 * (1 + np.cos(np.pi * it / max(1, cfg.iters))))
    losses = []
    t0 = time.time()
    model.train()
    for it in range(cfg.iters):
        sc = gen_scenario(spec, rng)
        sigma = sample_sigma(noise, trng)
        eps = torch.randn(sc.frames.shape, generator=trng)
        routing = None if it < cfg.dense_iters else router
        batch = PackedBatch.build(sc.frames, sc.schedule, sigma, eps, routing)
        loss = tf_loss(batch, model)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip)
        opt.step()
        sched.step()
        losses.append(loss.item())
        if on_log and (it % cfg.log_every == 0 or it == cfg.iters - 1):
            on_log({"iter": it, "L_tune": float(np.mean(losses[-cfg.log_every:])), "sigma": sigma,
                    "grad_norms": {"model": float(gnorm)}, "elapsed": time.time() - t0})
    model.eval()
    return losses


def jsonl_logger(path) -> Callable[[dict], None]:
    def write(rec: dict) -> None:
        with open(path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
        log.info("%s", rec)

    return write
