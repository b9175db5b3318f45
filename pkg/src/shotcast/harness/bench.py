"""Memory-ablation benchmark: window-only vs. first-frame sink vs. content routing.

Per seed, a model is trained with teacher forcing on synthetic scenarios, then
each variant generates the final shot of held-out scenarios after the earlier
shots have been written into its cache as ground truth. The score is the
recall error of the entity that re-enters in that shot.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..model import VelocityTransformer
from ..rollout import RolloutSession
from .config import RunConfig
from .metrics import recall_error
from .scenario import gen_scenario
from .training import train_tf

log = logging.getLogger(__name__)

VARIANTS = {"no-memory": "none", "sink": "sink", "camr": "camr"}
EVAL_SEED_BASE = 1_000_000


@dataclass
class BenchResult:
    variants: list[str]
    seeds: list[int]
    errors: dict[str, list[float]] = field(default_factory=dict)  # variant -> per-seed mean recall error
    train_seconds: list[float] = field(default_factory=list)
    final_loss: list[float] = field(default_factory=list)

    def mean(self, v: str) -> float:
        return float(np.mean(self.errors[v]))

    def std(self, v: str) -> float:
        return float(np.std(self.errors[v]))

    def ordering_holds(self) -> bool:
        need = [v for v in ("camr", "sink", "no-memory") if v in self.errors]
        means = [self.mean(v) for v in need]
        return all(a < b for a, b in zip(means, means[1:]))

    def camr_gain(self) -> float | None:
        if "camr" not in self.errors or "no-memory" not in self.errors:
            return None
        return 1.0 - self.mean("camr") / self.mean("no-memory")

    def to_dict(self) -> dict:
        return {
            "variants": {v: {"per_seed": self.errors[v], "mean": self.mean(v), "std": self.std(v)}
                         for v in self.variants},
            "seeds": self.seeds,
            "ordering_camr_sink_none": self.ordering_holds(),
            "camr_gain_vs_no_memory": self.camr_gain(),
            "train_seconds": self.train_seconds,
            "final_train_loss": self.final_loss,
        }

    def table(self) -> str:
        head = f"{'variant':<10} {'mean':>8} {'std':>8}  " + " ".join(f"s{s:<6}" for s in self.seeds)
        rows = [head, "-" * len(head)]
        for v in self.variants:
            per = " ".join(f"{e:<7.4f}" for e in self.errors[v])
            rows.append(f"{v:<10} {self.mean(v):>8.4f} {self.std(v):>8.4f}  {per}")
        gain = self.camr_gain()
        if gain is not None:
            rows.append(f"camr vs no-memory: {100 * gain:.1f}% lower recall error")
        rows.append(f"ordering camr < sink < no-memory: {'yes' if self.ordering_holds() else 'no'}")
        return "\n".join(rows)

    def tsv(self) -> str:
        lines = ["variant\tseed\trecall_error"]
        for v in self.variants:
            lines += [f"{v}\t{s}\t{e:.6f}" for s, e in zip(self.seeds, self.errors[v])]
        return "\n".join(lines) + "\n"


@torch.no_grad()
def evaluate_variant(model: VelocityTransformer, cfg: RunConfig, policy: str, seed: int) -> float:
    """Mean recall error over the re-entry shot of ``cfg.eval_scenarios`` held-out scenarios."""
    spec = cfg.scenario
    L = spec.L
    errs = []
    for j in range(cfg.eval_scenarios):
        sc = gen_scenario(spec, EVAL_SEED_BASE + 1000 * seed + j)
        first_gen = sc.schedule.boundaries[-1] // L + 1
        sess = RolloutSession(model, cfg.session(policy=policy, seed=1000 * seed + j), sc.schedule)
        for i in range(1, first_gen):
            sess.ingest_chunk(sc.chunk(i))
        for _ in range(first_gen, spec.num_chunks + 1):
            chunk = sess.generate_chunk()
            for rec in sc.records:
                if any(chunk.first_frame <= f < chunk.first_frame + L for f in rec.frames):
                    errs.append(recall_error(chunk, rec))
    return float(np.mean(errs))


def train_model(cfg: RunConfig, seed: int, on_log=None) -> tuple[VelocityTransformer, list[float]]:
    model = VelocityTransformer(dataclasses.replace(cfg.model, seed=seed))
    tcfg = dataclasses.replace(cfg.train, seed=seed)
    losses = train_tf(model, cfg.scenario, cfg.router("camr"), tcfg, cfg.noise, on_log)
    return model, losses


def run_bench(cfg: RunConfig, variants=tuple(VARIANTS), on_log=None) -> BenchResult:
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants {unknown}; expected {list(VARIANTS)}")
    torch.set_num_threads(1)
    res = BenchResult(list(variants), list(cfg.seeds), {v: [] for v in variants})
    for seed in cfg.seeds:
        t0 = time.time()
        model, losses = train_model(cfg, seed, on_log)
        res.train_seconds.append(time.time() - t0)
        res.final_loss.append(float(np.mean(losses[-100:])))
        for v in variants:
            err = evaluate_variant(model, cfg, VARIANTS[v], seed)
            res.errors[v].append(err)
            log.info("seed %d %s recall %.4f", seed, v, err)
    return res


def write_outputs(res: BenchResult, out_dir) -> dict[str, Path]:
    from .plotting import plot_bench

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / "bench.json", "tsv": out / "bench.tsv", "table": out / "bench.txt",
             "figure": out / "bench.png"}
    paths["json"].write_text(json.dumps(res.to_dict(), indent=2))
    paths["tsv"].write_text(res.tsv())
    paths["table"].write_text(res.table() + "\n")
    plot_bench(res, paths["figure"])
    return paths
