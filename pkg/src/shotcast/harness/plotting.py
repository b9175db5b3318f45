"""Figures written next to the delimited outputs. Uses the non-interactive Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_bench(res, path) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    xs = np.arange(len(res.variants))
    means = [res.mean(v) for v in res.variants]
    ax.bar(xs, means, color="#8fa8c8", width=0.6)
    for x, v in zip(xs, res.variants):
        pts = res.errors[v]
        ax.scatter(np.full(len(pts), x) + np.linspace(-0.12, 0.12, len(pts)), pts, s=12, color="k", zorder=3)
    ax.set_xticks(xs, res.variants)
    ax.set_ylabel("recall error")
    ax.set_title(f"memory ablation ({len(res.seeds)} seeds)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_curves(records: list[dict], keys: list[str], path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for key in keys:
        pts = [(r["iter"], r[key]) for r in records if key in r]
        if pts:
            it, val = zip(*pts)
            ax.plot(it, val, label=key, lw=1)
    ax.set_xlabel("iteration")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_rollout(jumps: np.ndarray, is_cut: np.ndarray, path, positions: list[int] | None = None) -> None:
    """Chunk-to-chunk jumps with requested cuts marked; optional attended-frame trace."""
    rows = 2 if positions else 1
    fig, axes = plt.subplots(rows, 1, figsize=(6, 2.4 * rows), squeeze=False)
    ax = axes[0, 0]
    x = np.arange(1, len(jumps) + 1)
    ax.plot(x, jumps, lw=1, color="#555")
    ax.scatter(x[is_cut], jumps[is_cut], color="C3", s=18, zorder=3, label="shot cut")
    ax.set_ylabel("chunk jump")
    ax.legend(fontsize=8)
    if positions:
        axes[1, 0].step(np.arange(1, len(positions) + 1), positions, where="mid")
        axes[1, 0].set_ylabel("attended frames")
        axes[1, 0].set_xlabel("chunk")
    else:
        ax.set_xlabel("chunk boundary")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
