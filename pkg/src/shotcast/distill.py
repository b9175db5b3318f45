"""Few-step distillation: ODE-trajectory initialization, distribution matching, adversarial term.

The teacher is a many-step flow model; the student learns to produce clean
chunks in ``steps`` Euler steps. Training runs in three phases per iteration,
each with its own optimizer and with gradients confined to the module being
updated:

* generator: distribution-matching gradient (teacher minus fake-score x0
  estimate) plus an optional non-saturating adversarial term;
* fake score: flow matching on the student's own rollouts only;
* discriminator: logistic loss on mid-layer features of real vs. student
  chunks.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import torch
from torch import nn

from . import container
from .memory import RouterConfig
from .model import VelocityTransformer, fm_loss, x0_from_velocity
from .rollout import RolloutSession, SessionConfig
from .stream import NoiseConfig, flow_interpolate, sample_sigma, solver_sigmas, subsample_indices

log = logging.getLogger(__name__)

Denoiser = Callable[[torch.Tensor, float], torch.Tensor]  # (x_t, sigma) -> velocity


# -- trajectories -------------------------------------------------------------

@dataclass
class DenoiseTrajectory:
    noise: torch.Tensor
    sigmas: torch.Tensor       # full solver grid, length base_steps + 1
    keep: list[int]            # grid indices of the retained noisy states
    states: list[torch.Tensor]  # x at sigmas[keep]
    x0: torch.Tensor

    @property
    def kept_sigmas(self) -> list[float]:
        return [float(self.sigmas[j]) for j in self.keep]


def euler_solve(denoiser: Denoiser, x: torch.Tensor, sigmas, record: set[int] | None = None):
    """Integrate ``dx/dsigma = v`` over a decreasing grid; returns ``(x_final, {j: x_j})``."""
    sigmas = [float(s) for s in sigmas]
    seen = {}
    for j in range(len(sigmas) - 1):
        if record is not None and j in record:
            seen[j] = x
        v = denoiser(x, sigmas[j])
        if not torch.isfinite(v).all():
            raise FloatingPointError(f"non-finite velocity at step {j} (sigma={sigmas[j]:.4g})")
        x = x + (sigmas[j + 1] - sigmas[j]) * v
    return x, seen


@torch.no_grad()
def teacher_trajectory(teacher: Denoiser, eps: torch.Tensor, steps: int = 48, keep: int = 4,
                       shift: float = 3.0) -> DenoiseTrajectory:
    """Run the teacher for ``steps`` Euler steps from ``eps``, keeping ``keep`` evenly spaced states."""
    sigmas = solver_sigmas(steps, shift, steps)
    idx = subsample_indices(steps, keep)
    x0, seen = euler_solve(teacher, eps, sigmas, set(idx))
    return DenoiseTrajectory(eps, sigmas, idx, [seen[j] for j in idx], x0)


def student_sample(student: Denoiser, eps: torch.Tensor, steps: int = 4, shift: float = 3.0,
                   base_steps: int = 48) -> torch.Tensor:
    """Few-step sample on the subsampled teacher grid."""
    x, _ = euler_solve(student, eps, solver_sigmas(steps, shift, base_steps))
    return x


class PackedDenoiser:
    """Velocity of every noisy chunk given clean context, as a ``(x_t, sigma)`` callable."""

    def __init__(self, model: VelocityTransformer, clean: torch.Tensor, prompts: torch.Tensor,
                 prompt_index: torch.Tensor, L: int, routing=None):
        self.model, self.clean, self.prompts = model, clean, prompts
        self.prompt_index, self.L, self.routing = prompt_index, L, routing

    def __call__(self, x: torch.Tensor, sigma: float, **kw):
        out = self.model.forward_packed(self.clean, x, sigma, self.prompts, self.prompt_index,
                                        self.L, self.routing, **kw)
        return out if kw else out.velocity


class ChunkDenoiser:
    """Velocity of the next chunk of a session (cache untouched) as a callable."""

    def __init__(self, session: RolloutSession):
        self.session = session
        self.fields = None

    def __call__(self, x: torch.Tensor, sigma: float) -> torch.Tensor:
        s = self.session
        i = s.cursor
        out = s.model.forward_chunk(x, sigma, s.schedule.prompt_for_chunk(i), i, s.stores,
                                    s.config.router, fields=self.fields)
        if not s.config.route_per_step:
            self.fields = out.fields
        return out.velocity


# -- losses -------------------------------------------------------------------

def init_loss(pred_x0: torch.Tensor, target_x0: torch.Tensor) -> torch.Tensor:
    """Regression of the student's one-shot clean estimate onto the teacher's endpoint."""
    return ((pred_x0 - target_x0) ** 2).mean()


def dmd_gradient(real_x0: torch.Tensor, fake_x0: torch.Tensor) -> torch.Tensor:
    """Generator-side distribution-matching direction (fake minus real estimate)."""
    return fake_x0 - real_x0


def dmd_loss(x0: torch.Tensor, real_x0: torch.Tensor, fake_x0: torch.Tensor) -> torch.Tensor:
    """Surrogate whose gradient w.r.t. ``x0`` is ``(fake_x0 - real_x0) / x0.numel()``."""
    grad = dmd_gradient(real_x0, fake_x0).detach()
    return 0.5 * ((x0 - (x0 - grad).detach()) ** 2).mean()


def dmd_update(x0: torch.Tensor, real: Callable, fake: Callable, sigma: float,
               eps: torch.Tensor) -> torch.Tensor:
    """DMD surrogate for student samples ``x0``.

    ``real``/``fake`` map a noised sample ``x_t`` (at ``sigma``) to clean
    estimates; neither receives gradients.
    """
    x_t = flow_interpolate(x0.detach(), eps, sigma)
    with torch.no_grad():
        real_x0, fake_x0 = real(x_t), fake(x_t)
    return dmd_loss(x0, real_x0, fake_x0)


def softplus(u: torch.Tensor) -> torch.Tensor:
    """``log(1 + exp(u))`` without overflow for large ``u``."""
    u = torch.as_tensor(u)
    big = u > 30
    safe = torch.where(big, torch.zeros_like(u), u)
    return torch.where(big, u + torch.log1p(torch.exp(-u.abs())), torch.log1p(torch.exp(safe)))


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    return softplus(-d_real).mean() + softplus(d_fake).mean()


def generator_adv_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return softplus(-d_fake).mean()


def gan_losses(d_real: torch.Tensor, d_fake: torch.Tensor, l_dmd: torch.Tensor | float = 0.0,
               lam: float = 0.1) -> tuple[torch.Tensor, torch.Tensor]:
    """``(L_D, L_G)`` with ``L_G = l_dmd + lam * softplus(-d_fake)``."""
    return discriminator_loss(d_real, d_fake), l_dmd + lam * generator_adv_loss(d_fake)


class Discriminator(nn.Module):
    """Two-layer MLP over mean-pooled mid-layer tokens of each chunk."""

    def __init__(self, width: int, hidden: int = 64, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = nn.Sequential(nn.Linear(width, hidden), nn.SiLU(), nn.Linear(hidden, 1))

    def forward(self, features: torch.Tensor, L: int) -> torch.Tensor:
        """``features`` is ``(N*L, P, width)``; returns one logit per chunk."""
        n = features.shape[0] // L
        pooled = features.reshape(n, L * features.shape[1], features.shape[2]).mean(dim=1)
        return self.net(pooled).squeeze(-1)


# -- provenance ---------------------------------------------------------------

@dataclass(frozen=True)
class Tagged:
    """Latents with a record of where they came from."""

    frames: torch.Tensor
    source: str  # "student" or "data"


def _grad_norm(module: nn.Module) -> float:
    sq = [p.grad.detach().pow(2).sum() for p in module.parameters() if p.grad is not None]
    return float(torch.stack(sq).sum().sqrt()) if sq else 0.0


def _no_grads(*modules: nn.Module) -> bool:
    return all(p.grad is None for m in modules for p in m.parameters())


# -- training state -----------------------------------------------------------

@dataclass
class DistillConfig:
    steps: int = 4
    base_steps: int = 48
    shift: float = 3.0
    lam: float = 0.1
    lr_student: float = 2e-4
    lr_fake: float = 4e-4
    lr_disc: float = 4e-4
    fake_updates: int = 1
    init_iters: int = 100
    dmd_iters: int = 200
    W: int = 3
    k: int = 5
    policy: str = "camr"
    seed: int = 0
    log_every: int = 10


@dataclass
class DistillState:
    teacher: VelocityTransformer
    student: VelocityTransformer
    fake: VelocityTransformer
    disc: Discriminator
    config: DistillConfig
    teacher_hash: str = ""
    opt_student: torch.optim.Optimizer = field(init=False)
    opt_fake: torch.optim.Optimizer = field(init=False)
    opt_disc: torch.optim.Optimizer = field(init=False)

    def __post_init__(self):
        self.teacher.requires_grad_(False)
        self.teacher.eval()
        self.teacher_hash = container.parameter_hash(self.teacher)
        c = self.config
        self.opt_student = torch.optim.AdamW(self.student.parameters(), lr=c.lr_student, weight_decay=0.0)
        self.opt_fake = torch.optim.AdamW(self.fake.parameters(), lr=c.lr_fake, weight_decay=0.0)
        self.opt_disc = torch.optim.AdamW(self.disc.parameters(), lr=c.lr_disc, weight_decay=0.0)

    @classmethod
    def from_teacher(cls, teacher: VelocityTransformer, config: DistillConfig) -> "DistillState":
        """Student and fake score both start as copies of the teacher."""
        student = copy.deepcopy(teacher).requires_grad_(True)
        fake = copy.deepcopy(teacher).requires_grad_(True)
        disc = Discriminator(teacher.config.width, seed=config.seed)
        return cls(teacher, student, fake, disc, config)

    @property
    def router(self) -> RouterConfig:
        c = self.config
        return RouterConfig(W=c.W, k=c.k, policy=c.policy)

    def check_teacher(self) -> None:
        if container.parameter_hash(self.teacher) != self.teacher_hash:
            raise RuntimeError("teacher parameters changed during distillation")


def _packed_inputs(scenario):
    from .masks import cross_routing_frames

    L = scenario.schedule.L
    N = scenario.frames.shape[0] // L
    idx = cross_routing_frames(N, L, scenario.schedule)[: N * L: L]
    return N, L, scenario.schedule.prompts, idx


def ode_init_step(state: DistillState, scenario, rng: torch.Generator) -> dict:
    """One regression step of the student onto a teacher ODE state pair, all chunks packed."""
    c = state.config
    N, L, prompts, idx = _packed_inputs(scenario)
    clean = scenario.frames
    eps = torch.randn(clean.shape, generator=rng)
    teacher = PackedDenoiser(state.teacher, clean, prompts, idx, L, state.router)
    traj = teacher_trajectory(teacher, eps, c.base_steps, c.steps, c.shift)
    j = int(torch.randint(len(traj.keep), (), generator=rng))
    sigma = traj.kept_sigmas[j]
    x_t = traj.states[j]
    v = state.student.forward_packed(clean, x_t, sigma, prompts, idx, L, state.router).velocity
    loss = init_loss(x0_from_velocity(x_t, v, sigma), traj.x0)
    state.opt_student.zero_grad(set_to_none=True)
    loss.backward()
    gn = _grad_norm(state.student)
    state.opt_student.step()
    return {"L_init": loss.item(), "sigma": sigma, "grad_norms": {"student": gn}}


def student_rollout(state: DistillState, scenario, seed: int):
    """Generate every chunk of ``scenario``'s schedule autoregressively with the student.

    Returns the generated frames tagged as student output, the input of each
    chunk's final solver step, that step's sigma, and the per-layer routing
    used for each chunk.
    """
    c = state.config
    N, L, _, _ = _packed_inputs(scenario)
    cfg = SessionConfig(W=c.W, k=c.k, L=L, steps=c.steps, shift=c.shift, policy=c.policy,
                        base_steps=c.base_steps, seed=seed)
    sess = RolloutSession(state.student, cfg, scenario.schedule)
    frames, last_inputs = [], []
    sigma = None
    for _ in range(N):
        frames.append(sess.generate_chunk().frames)
        x_last, sigma = sess.last_step_input
        last_inputs.append(x_last)
    layers = state.student.config.layers
    routing = [[sess.fields_log[i][li] for i in range(1, N + 1)] for li in range(layers)]
    return Tagged(torch.cat(frames), "student"), torch.cat(last_inputs), sigma, routing


def generator_step(state: DistillState, scenario, rng: torch.Generator, noise: NoiseConfig) -> dict:
    c = state.config
    N, L, prompts, idx = _packed_inputs(scenario)
    seed = int(torch.randint(2**31 - 1, (), generator=rng))
    gen, x_last, sigma_last, routing = student_rollout(state, scenario, seed)
    context = gen.frames.detach()
    # Re-run the final solver step with gradients, reproducing the rollout's attention exactly.
    v = state.student.forward_packed(context, x_last, sigma_last, prompts, idx, L, routing).velocity
    x0 = x0_from_velocity(x_last, v, sigma_last)

    sigma = sample_sigma(noise, rng)
    eps = torch.randn(x0.shape, generator=rng)

    def x0_estimate(model):
        def f(x_t):
            v = model.forward_packed(context, x_t, sigma, prompts, idx, L, state.router).velocity
            return x0_from_velocity(x_t, v, sigma)
        return f

    l_dmd = dmd_update(x0, x0_estimate(state.teacher), x0_estimate(state.fake), sigma, eps)
    l_adv = torch.zeros(())
    if c.lam > 0:
        state.fake.requires_grad_(False)
        state.disc.requires_grad_(False)
        try:
            x_t_g = flow_interpolate(x0, eps, sigma)
            out = state.fake.forward_packed(context, x_t_g, sigma, prompts, idx, L, state.router,
                                            return_features=True)
            l_adv = generator_adv_loss(state.disc(out.features, L))
        finally:
            state.fake.requires_grad_(True)
            state.disc.requires_grad_(True)
    l_g = l_dmd + c.lam * l_adv
    for opt in (state.opt_student, state.opt_fake, state.opt_disc):
        opt.zero_grad(set_to_none=True)
    l_g.backward()
    if not _no_grads(state.teacher, state.fake, state.disc):
        raise RuntimeError("generator loss leaked gradients outside the student")
    gn = _grad_norm(state.student)
    state.opt_student.step()
    return {"L_DMD": l_dmd.item(), "L_G": l_g.item(), "L_adv": l_adv.item(),
            "grad_norms": {"student": gn}, "_generated": gen, "_sigma": sigma}


def fake_step(state: DistillState, scenario, generated: Tagged, rng: torch.Generator,
              noise: NoiseConfig) -> dict:
    """Flow-matching update of the fake score on student rollouts only."""
    if generated.source != "student":
        raise ValueError(f"fake score trains on student rollouts, got {generated.source!r} data")
    _, L, prompts, idx = _packed_inputs(scenario)
    x0 = generated.frames.detach()
    sigma = sample_sigma(noise, rng)
    eps = torch.randn(x0.shape, generator=rng)
    v = state.fake.forward_packed(x0, flow_interpolate(x0, eps, sigma), sigma, prompts, idx, L,
                                  state.router).velocity
    loss = fm_loss(v, x0, eps)
    state.opt_fake.zero_grad(set_to_none=True)
    loss.backward()
    gn = _grad_norm(state.fake)
    state.opt_fake.step()
    return {"L_fake": loss.item(), "grad_norms": {"fake": gn}}


def disc_step(state: DistillState, scenario, generated: Tagged, sigma: float, rng: torch.Generator) -> dict:
    _, L, prompts, idx = _packed_inputs(scenario)
    real = Tagged(scenario.frames, "data")
    feats = []
    with torch.no_grad():
        for sample in (real, generated):
            x0 = sample.frames.detach()
            eps = torch.randn(x0.shape, generator=rng)
            out = state.fake.forward_packed(x0, flow_interpolate(x0, eps, sigma), sigma, prompts, idx, L,
                                            state.router, return_features=True)
            feats.append(out.features)
    l_d = discriminator_loss(state.disc(feats[0], L), state.disc(feats[1], L))
    state.opt_disc.zero_grad(set_to_none=True)
    l_d.backward()
    gn = _grad_norm(state.disc)
    state.opt_disc.step()
    return {"L_D": l_d.item(), "grad_norms": {"disc": gn}}


def distill(state: DistillState, scenarios: Callable[[int], object],
            on_log: Callable[[dict], None] | None = None) -> list[dict]:
    """Initialization phase followed by DMD(+GAN) phase; ``scenarios(it)`` yields training data."""
    c = state.config
    rng = torch.Generator().manual_seed(c.seed)
    noise = NoiseConfig(shift=c.shift, rng_seed=c.seed)
    history = []
    t0 = time.time()

    def emit(rec):
        rec["elapsed"] = time.time() - t0
        history.append(rec)
        if on_log and (rec["iter"] % c.log_every == 0):
            on_log(rec)

    state.student.train()
    for it in range(c.init_iters):
        rec = ode_init_step(state, scenarios(it), rng)
        emit({"phase": "init", "iter": it, **rec})
    for it in range(c.dmd_iters):
        sc = scenarios(c.init_iters + it)
        g = generator_step(state, sc, rng, noise)
        gen, sigma = g.pop("_generated"), g.pop("_sigma")
        rec = {"phase": "dmd", "iter": it, **g}
        norms = dict(g["grad_norms"])
        for _ in range(c.fake_updates):
            f = fake_step(state, sc, gen, rng, noise)
            rec["L_fake"] = f["L_fake"]
            norms.update(f["grad_norms"])
        if c.lam > 0:
            d = disc_step(state, sc, gen, sigma, rng)
            rec["L_D"] = d["L_D"]
            norms.update(d["grad_norms"])
        rec["grad_norms"] = norms
        emit(rec)
    state.check_teacher()
    state.student.eval()
    return history

