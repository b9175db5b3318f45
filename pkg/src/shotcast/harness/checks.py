"""Invariant checks shared by ``verify`` and the acceptance tests.

Every check returns a :class:`CheckResult`; sizes are parameters so the CLI
can run a quick pass while the acceptance suite runs the full one.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from ..distill import dmd_update, gan_losses, softplus, teacher_trajectory
from ..masks import build_tf_mask
from ..memory import KVMemoryStore, ReceptiveField, RouterConfig, select_topk
from ..model import ModelConfig, PackedBatch, VelocityTransformer, tf_loss, x0_from_velocity
from ..rollout import RolloutSession, SessionConfig
from ..stream import ShotSchedule, flow_interpolate, prompt_embedding
from . import oracles


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(name, fn, *args, **kw) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn(*args, **kw)
    except Exception as exc:  # a crashing check is a failing check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


def toy_model(layers: int = 2, heads: int = 2, head_dim: int = 8, channels: int = 2, grid: int = 2,
              seed: int = 0, dtype=torch.float32) -> VelocityTransformer:
    cfg = ModelConfig(channels=channels, grid_h=grid, grid_w=grid, layers=layers, heads=heads,
                      head_dim=head_dim, seed=seed)
    return VelocityTransformer(cfg).to(dtype)


def _random_fields(N: int, L: int, rng: np.random.Generator) -> dict[int, ReceptiveField]:
    fields = {}
    for i in range(1, N + 1):
        hist = [f for f in range((i - 1) * L) if rng.random() < 0.5]
        fields[i] = ReceptiveField(i, (), tuple(hist), tuple(range((i - 1) * L, i * L)))
    return fields


# -- 1. mask -------------------------------------------------------------------

def mask_matches_enumerator(Ns=(1, 2, 3, 4), Ls=(1, 3), routed_trials: int = 3, seed: int = 0):
    rng = np.random.default_rng(seed)
    cases = 0
    for N in Ns:
        for L in Ls:
            if not torch.equal(build_tf_mask(N, L).matrix, oracles.enumerate_visibility(N, L)):
                return False, f"dense mask differs at N={N}, L={L}"
            cases += 1
            for _ in range(routed_trials):
                fields = _random_fields(N, L, rng)
                want = oracles.enumerate_visibility(N, L, {i: set(f.history_frames) for i, f in fields.items()})
                if not torch.equal(build_tf_mask(N, L, fields).matrix, want):
                    return False, f"routed mask differs at N={N}, L={L}"
                cases += 1
    return True, f"{cases} layouts identical"


# -- 2. leakage ----------------------------------------------------------------

def _reachable(mask: torch.Tensor, layers: int) -> torch.Tensor:
    reach = mask.clone()
    m = mask.to(torch.int64)
    for _ in range(layers - 1):
        reach = (reach.to(torch.int64) @ m) > 0
    return reach


def zero_leakage(trials: int = 100, layers: int = 4, N: int = 4, L: int = 2, seed: int = 0):
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = toy_model(layers=layers, seed=seed, dtype=torch.float64)
    C, G = model.config.channels, model.config.grid_h
    clean = torch.randn(N * L, C, G, G, dtype=torch.float64)
    noisy = torch.randn_like(clean)
    prompts = torch.randn(2, model.config.prompt_dim, dtype=torch.float64)
    pidx = torch.tensor([min(i, 1) for i in range(N)])
    NL = N * L
    with torch.no_grad():
        for t in range(trials):
            fields = _random_fields(N, L, rng) if t % 2 else None
            mask = build_tf_mask(N, L, fields)
            reach = _reachable(mask.matrix, layers)
            i = int(rng.integers(1, N + 1))
            rows = list(range(NL + (i - 1) * L, NL + i * L))
            hidden = torch.nonzero(~reach[rows].any(dim=0)).flatten().tolist()
            if not hidden:
                continue
            f = int(rng.choice(hidden))
            base = model.forward_packed(clean, noisy, 0.5, prompts, pidx, L, mask).velocity
            c2, n2 = clean.clone(), noisy.clone()
            target = c2 if f < NL else n2
            target[f % NL] += 10.0 * torch.randn_like(target[f % NL])
            out = model.forward_packed(c2, n2, 0.5, prompts, pidx, L, mask).velocity
            sl = slice((i - 1) * L, i * L)
            diff = (out[sl] - base[sl]).abs().max().item()
            if diff != 0.0:
                return False, f"trial {t}: perturbing packed frame {f} moved noisy chunk {i} by {diff:.3e}"
    return True, f"{trials} perturbations, all exactly 0"


# -- 3. equivalence ------------------------------------------------------------

def packed_vs_streaming(N: int = 6, L: int = 3, tol: float = 1e-5, seed: int = 0):
    torch.manual_seed(seed)
    model = toy_model(layers=3, heads=2, head_dim=8, channels=4, grid=4, seed=seed)
    cfg = model.config
    clean = torch.randn(N * L, cfg.channels, cfg.grid_h, cfg.grid_w)
    eps = torch.randn_like(clean)
    s = 0.7
    noisy = flow_interpolate(clean, eps, s)
    prompts = torch.randn(2, cfg.prompt_dim)
    pidx = torch.tensor([0] * (N // 2) + [1] * (N - N // 2))
    errors = []
    with torch.no_grad():
        for router in (None, RouterConfig(W=1, k=2)):
            stores = [KVMemoryStore() for _ in range(cfg.layers)]
            outs, fields = [], []
            for i in range(1, N + 1):
                rows = slice((i - 1) * L, i * L)
                o = model.forward_chunk(noisy[rows], s, prompts[pidx[i - 1]], i, stores, router)
                outs.append(o.velocity)
                fields.append(o.fields)
                model.forward_chunk(clean[rows], 0.0, prompts[pidx[i - 1]], i, stores, router,
                                    fields=o.fields, write=True)
            stream = torch.cat(outs)
            routing = None if router is None else [[fields[i][li] for i in range(N)] for li in range(cfg.layers)]
            packed = model.forward_packed(clean, noisy, s, prompts, pidx, L, routing).velocity
            for i in range(N):
                sl = slice(i * L, (i + 1) * L)
                errors.append(float((packed[sl] - stream[sl]).norm() / stream[sl].norm()))
            if router is not None:
                dyn = model.forward_packed(clean, noisy, s, prompts, pidx, L, router)
                if dyn.fields != routing:
                    return False, "packed routing chose different receptive fields than streaming"
    worst = max(errors)
    return worst <= tol, f"max relative error {worst:.2e} over {len(errors)} chunks (tol {tol:g})"


# -- 4. top-k ------------------------------------------------------------------

def topk_matches_sort(caches: int = 1000, max_size: int = 200, k: int = 5, seed: int = 0):
    rng = np.random.default_rng(seed)
    for c in range(caches):
        n = int(rng.integers(0, max_size + 1))
        frames = rng.permutation(max(n, 1) * 3)[:n].tolist()
        # coarse scores force plenty of ties
        scores = (rng.integers(-4, 5, size=n) / 2.0).tolist()
        got = select_topk(dict(zip(frames, scores)), k)
        want = oracles.topk_by_sort(frames, scores, k)
        if got != want:
            return False, f"cache {c} (size {n}): {got} != {want}"
    return True, f"{caches} caches identical to the sort oracle"


# -- 5. positions --------------------------------------------------------------

def position_bound(chunks: int = 1000, W: int = 3, k: int = 5, L: int = 3, steps: int = 1, seed: int = 0):
    model = toy_model(layers=2, heads=2, head_dim=8, channels=2, grid=2, seed=seed)
    cfg = SessionConfig(W=W, k=k, L=L, steps=steps, seed=seed)
    bound = cfg.span
    sess = RolloutSession(model, cfg, ShotSchedule.single(L, prompt_embedding(seed), seed))
    for _ in range(chunks):
        sess.generate_chunk()
    steady = sess.attended[W + math.ceil(k / L):]
    if sess.max_position >= bound:
        return False, f"position {sess.max_position} reached (bound {bound})"
    if any(a != bound for a in steady):
        return False, f"attended frames vary in steady state: {sorted(set(steady))}"
    return True, f"max position {sess.max_position} < {bound}; steady attended = {bound} over {len(steady)} chunks"


# -- 6. solver -----------------------------------------------------------------

def solver_oracle(tol: float = 1e-5, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(3, 2, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 2, 4, 4, generator=g, dtype=torch.float64)
    v = oracles.straight_path_velocity(x0)
    full = teacher_trajectory(v, eps, steps=48, keep=4)
    err48 = (full.x0 - x0).abs().max().item()
    one = teacher_trajectory(v, eps, steps=1, keep=1)
    err1 = (one.x0 - x0).abs().max().item()
    # retained states must sit on the straight path
    path = max((s - flow_interpolate(x0, eps, sig)).abs().max().item()
               for s, sig in zip(full.states, full.kept_sigmas))
    ok = err48 <= tol and err1 <= 1e-12 and path <= tol
    return ok, f"48-step error {err48:.1e}, 1-step error {err1:.1e}, retained-state error {path:.1e}"


# -- 7. gradients --------------------------------------------------------------

def _grad_model(seed: int) -> VelocityTransformer:
    return toy_model(layers=2, heads=2, head_dim=8, channels=2, grid=2, seed=seed, dtype=torch.float64)


def _fd_vs_autograd(model, loss_fn, surrogate_fn, n_coords: int, seed: int):
    params = [p for p in model.parameters()]
    rng = np.random.default_rng(seed)
    coords = oracles.random_coords(params, n_coords, rng)
    model.zero_grad(set_to_none=True)
    surrogate_fn().backward()
    auto = np.asarray([params[pi].grad[idx].item() if params[pi].grad is not None else 0.0
                       for pi, idx in coords])
    fd = oracles.central_difference(loss_fn, params, coords)
    return float(np.linalg.norm(auto - fd) / max(np.linalg.norm(fd), 1e-12))


def gradient_checks(tol: float = 1e-3, coords: int = 24, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    model = _grad_model(seed)
    C, G = model.config.channels, model.config.grid_h
    N, L = 3, 2
    frames = torch.randn(N * L, C, G, G, generator=g, dtype=torch.float64)
    eps = torch.randn(frames.shape, generator=g, dtype=torch.float64)
    sched = ShotSchedule.from_seeds(L, [2 * L], [1, 2], model.config.prompt_dim)
    batch = PackedBatch.build(frames, sched, 0.6, eps, RouterConfig(W=1, k=1))
    batch.prompts = batch.prompts.double()
    tf = lambda: tf_loss(batch, model)  # noqa: E731
    rel_tf = _fd_vs_autograd(model, tf, tf, coords, seed)

    # DMD against linear real/fake estimators, whose implied objective is known in closed form.
    a_real, a_fake, sigma = 0.8, 1.3, 0.45
    eps2 = torch.randn(frames.shape, generator=g, dtype=torch.float64)

    def student_x0():
        v = model.forward_packed(frames, batch.noisy, batch.sigma, batch.prompts, batch.prompt_index, L).velocity
        return x0_from_velocity(batch.noisy, v, batch.sigma)

    def implied():
        x_t = flow_interpolate(student_x0(), eps2, sigma)
        return (a_fake - a_real) / (2 * (1 - sigma) * x_t.numel()) * (x_t ** 2).sum()

    def surrogate():
        return dmd_update(student_x0(), lambda x: a_real * x, lambda x: a_fake * x, sigma, eps2)

    rel_dmd = _fd_vs_autograd(model, implied, surrogate, coords, seed + 1)
    ln2 = math.log(2.0)
    sp0 = softplus(torch.zeros((), dtype=torch.float64)).item()
    ld, _ = gan_losses(torch.zeros(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))
    const_ok = abs(sp0 - ln2) <= 1e-9 and abs(ld.item() - 2 * ln2) <= 1e-9
    ok = rel_tf <= tol and rel_dmd <= tol and const_ok
    return ok, (f"tf_loss rel {rel_tf:.1e}, dmd rel {rel_dmd:.1e}, softplus(0)-ln2 {sp0 - ln2:.1e}, "
                f"L_D(0,0)-2ln2 {ld.item() - 2 * ln2:.1e}")


# -- 9. interactive ------------------------------------------------------------

def interactive_continuation(before: int = 4, after: int = 3, seed: int = 0):
    model = toy_model(layers=2, heads=2, head_dim=8, channels=2, grid=2, seed=seed)
    cfg = SessionConfig(W=1, k=2, L=2, steps=2, seed=seed)
    sess = RolloutSession(model, cfg, ShotSchedule.single(2, prompt_embedding(1), 1))
    for _ in range(before):
        sess.generate_chunk()
    past = dict(sess.passes_by_chunk)
    boundary = sess.next_frame + cfg.L
    sess.append_shot(prompt_embedding(2), boundary, seed=2)
    blob = sess.snapshot()
    first = [sess.generate_chunk().frames for _ in range(after)]
    touched = {c: n for c, n in sess.passes_by_chunk.items() if c in past and n != past[c]}
    if touched or sess.history_passes:
        return False, f"continuation re-ran finished chunks: {touched}"
    per_chunk = cfg.steps + 1
    new = {c: n for c, n in sess.passes_by_chunk.items() if c not in past}
    if any(n != per_chunk for n in new.values()) or len(new) != after:
        return False, f"unexpected pass counts for new chunks: {new}"
    replay = RolloutSession.resume(blob, model)
    second = [replay.generate_chunk().frames for _ in range(after)]
    same = all(torch.equal(a, b) for a, b in zip(first, second))
    if not same:
        return False, "resumed session diverged from the original"
    if replay.snapshot() != sess.snapshot():
        return False, "snapshots after replay differ"
    return True, (f"{after} chunks after the cut: 0 passes over {before} finished chunks, "
                  f"{per_chunk} passes each; replay bitwise identical")


ALL_CHECKS = {
    "mask-enumerator": mask_matches_enumerator,
    "zero-leakage": zero_leakage,
    "packed-vs-streaming": packed_vs_streaming,
    "topk-oracle": topk_matches_sort,
    "position-bound": position_bound,
    "solver-oracle": solver_oracle,
    "gradients": gradient_checks,
    "interactive-continuation": interactive_continuation,
}

QUICK = {
    "zero-leakage": {"trials": 30},
    "topk-oracle": {"caches": 200},
    "position-bound": {"chunks": 100},
}


def run_checks(quick: bool = True, names=None) -> list[CheckResult]:
    out = []
    for name, fn in ALL_CHECKS.items():
        if names and name not in names:
            continue
        out.append(_timed(name, fn, **(QUICK.get(name, {}) if quick else {})))
    return out
