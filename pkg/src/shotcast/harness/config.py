"""Run configuration: one JSON document covering model, data, training and rollout."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..distill import DistillConfig
from ..memory import RouterConfig
from ..model import ModelConfig
from ..rope import routed_span
from ..rollout import SessionConfig
from ..stream import NoiseConfig
from .scenario import ScenarioSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _build(cls, doc, where: str):
    if doc is None:
        return cls()
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in doc.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(channels=4, grid_h=4, grid_w=4, layers=3,
                                                                    heads=2, head_dim=16))
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    W: int = 3
    k: int = 5
    policy: str = "camr"
    sample_steps: int = 16
    lam_adv: float = 0.1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    eval_scenarios: int = 10
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        m, s = self.model, self.scenario
        if (m.channels, m.grid_h, m.grid_w) != (s.channels, s.grid_h, s.grid_w):
            raise ConfigError("model latent shape does not match the scenario latent shape")
        if m.prompt_dim != s.prompt_dim:
            raise ConfigError("model and scenario prompt widths differ")
        span = routed_span(self.k, self.W, self.L)
        if span > m.f_train:
            raise ConfigError(f"k + (W+1)L = {span} exceeds the training horizon {m.f_train}")
        try:
            RouterConfig(W=self.W, k=self.k, policy=self.policy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def L(self) -> int:
        return self.scenario.L

    def router(self, policy: str | None = None) -> RouterConfig:
        return RouterConfig(W=self.W, k=self.k, policy=policy or self.policy)

    def session(self, policy: str | None = None, steps: int | None = None, seed: int = 0) -> SessionConfig:
        return SessionConfig(W=self.W, k=self.k, L=self.L, steps=steps or self.sample_steps,
                             shift=self.noise.shift, policy=policy or self.policy, seed=seed)

    def distill_config(self, seed: int = 0) -> DistillConfig:
        return dataclasses.replace(self.distill, W=self.W, k=self.k, policy=self.policy,
                                   shift=self.noise.shift, lam=self.lam_adv, seed=seed)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        sections = {"model": ModelConfig, "scenario": ScenarioSpec, "noise": NoiseConfig,
                    "train": TrainConfig, "distill": DistillConfig}
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw = {}
        for key, value in doc.items():
            if key in sections:
                kw[key] = _build(sections[key], value, key)
            elif key == "seeds":
                kw[key] = tuple(int(s) for s in value)
            else:
                kw[key] = value
        if "model" not in kw and "scenario" in kw:
            s = kw["scenario"]
            kw["model"] = ModelConfig(channels=s.channels, grid_h=s.grid_h, grid_w=s.grid_w, layers=3,
                                      heads=2, head_dim=16, prompt_dim=s.prompt_dim)
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)
