"""End-to-end experiment plumbing shared by the command line and the test suite:
a validated configuration tree, surrogate calibration, policy training,
evaluation on held-out environments and the reward-term ablation."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .env import REWARD_TERMS, EpisodeConfig, NavEnv
from .geometry import TubeEnvironment, generate_environment
from .metrics import (
    MetricsReport,
    TrajectoryLog,
    aggregate,
    env_log,
    evaluate,
    follower_config,
    oracle_config,
    oracle_controller,
    proportional_controller,
    rollout,
)
from .perception import DegradationProfile, calibrate_profile
from .rl import ActorCritic, PpoConfig, train

# cumulative reward subsets, in stacking order
ABLATION_VARIANTS = (
    ("dis",),
    ("dis", "dir"),
    ("dis", "dir", "succ"),
    ("dis", "dir", "succ", "stability"),
    ("dis", "dir", "succ", "stability", "step"),
)


class ConfigError(ValueError):
    pass


def _episode_recipe():
    # training and evaluation advance at constant speed whenever the gate is open
    return EpisodeConfig(forward_mode="constant")


@dataclass(frozen=True)
class RunConfig:
    train_profile: str = "simple"
    train_seed_base: int = 5000
    eval_profile: str = "complex"
    eval_seeds: tuple = tuple(range(900, 910))
    texture_amplitude: float = 0.05
    target_abs_rel: float = 0.245
    target_delta1: float = 0.677
    calibration_env_seed: int = 1
    validation_env_seed: int = 1001
    calibration_frames: int = 200
    degradation: DegradationProfile | None = None
    follower_gain: float = 1.0
    episode: EpisodeConfig = field(default_factory=_episode_recipe)
    ppo: PpoConfig = field(default_factory=PpoConfig)

    def __post_init__(self):
        for name in ("train_profile", "eval_profile"):
            if getattr(self, name) not in ("simple", "complex"):
                raise ConfigError(f"{name} must be 'simple' or 'complex'")
        if not 0.0 <= self.texture_amplitude <= 0.1:
            raise ConfigError("texture_amplitude must lie in [0, 0.1]")
        if not self.eval_seeds:
            raise ConfigError("eval_seeds must not be empty")
        if self.calibration_frames < 1:
            raise ConfigError("calibration_frames must be positive")
        object.__setattr__(self, "eval_seeds", tuple(int(s) for s in self.eval_seeds))

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["eval_seeds"] = list(self.eval_seeds)
        d["episode"] = self.episode.to_dict()
        d["ppo"] = self.ppo.to_dict()
        d["degradation"] = None if self.degradation is None else self.degradation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            if "episode" in d:
                d["episode"] = EpisodeConfig.from_dict(d["episode"])
            if "ppo" in d:
                d["ppo"] = PpoConfig.from_dict(d["ppo"])
            if d.get("degradation") is not None:
                d["degradation"] = DegradationProfile.from_dict(d["degradation"])
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **kw):
        return replace(self, **kw)


def make_env(profile, seed, config: RunConfig) -> TubeEnvironment:
    return generate_environment(profile, seed, texture_amplitude=config.texture_amplitude)


def resolve_degradation(config: RunConfig):
    """The configured degradation profile, calibrating one when none is given."""
    if config.degradation is not None:
        return config.degradation, None
    cam = config.episode.camera
    result = calibrate_profile(
        make_env("simple", config.calibration_env_seed, config), cam,
        config.target_abs_rel, config.target_delta1, seed=0,
        n_validate=config.calibration_frames,
        validation_env=make_env("simple", config.validation_env_seed, config),
    )
    return result.profile, result


def train_policy(config: RunConfig, profile: DegradationProfile, seed=0, total_steps=None,
                 reward_terms=None, curve_path=None, progress=None):
    ecfg = config.episode if reward_terms is None else config.episode.replace(reward_terms=tuple(reward_terms))
    ppo = config.ppo if total_steps is None else replace(config.ppo, total_steps=int(total_steps))

    def factory(rank, episode, episode_seed):
        env_seed = config.train_seed_base + 10_000 * rank + episode
        return NavEnv(make_env(config.train_profile, env_seed, config), ecfg, profile)

    return train(factory, ppo, seed=seed, curve_path=curve_path, progress=progress)


def agent_controller(agent: ActorCritic):
    rng = np.random.default_rng(0)

    def act(obs, env):
        return agent.act(obs, rng, deterministic=True)[0]
    return act


@dataclass
class EpisodeResult:
    seed: int
    tube: TubeEnvironment
    log: TrajectoryLog
    report: MetricsReport
    records: list


def controller_setup(kind, config: RunConfig, agent=None):
    """Episode settings and controller for ``policy``, ``oracle`` or ``lumen``."""
    if kind == "policy":
        if agent is None:
            raise ConfigError("policy evaluation needs a trained agent")
        return config.episode, agent_controller(agent)
    if kind == "oracle":
        return oracle_config(config.episode), oracle_controller()
    if kind == "lumen":
        return follower_config(config.episode), proportional_controller(config.follower_gain)
    raise ConfigError(f"unknown controller {kind!r}")


def eval_tubes(config: RunConfig, seeds=None, env_profile=None):
    seeds = config.eval_seeds if seeds is None else seeds
    return [(int(s), make_env(env_profile or config.eval_profile, s, config)) for s in seeds]


def run_episodes(config: RunConfig, profile, kind, agent=None, tubes=None, mode="excess"):
    """Evaluate one controller on each ``(seed, tube)`` pair (held-out seeds by default)."""
    tubes = eval_tubes(config) if tubes is None else tubes
    out = []
    for seed, tube in tubes:
        ecfg, ctl = controller_setup(kind, config, agent)
        env = rollout(tube, ecfg, profile, ctl, seed)
        log = env_log(env)
        out.append(EpisodeResult(seed, tube, log, evaluate(log, tube, mode), env.log))
    return out


def collision_free_completions(results, threshold=0.95):
    return sum(1 for r in results if r.report.n_collisions == 0 and r.report.completion >= threshold)


def ablation(config: RunConfig, profile, total_steps=100_000, seed=0, progress=None):
    """Train one policy per cumulative reward subset and evaluate each."""
    rows = []
    for terms in ABLATION_VARIANTS:
        agent, _ = train_policy(config, profile, seed=seed, total_steps=total_steps, reward_terms=terms,
                                progress=progress)
        results = run_episodes(config, profile, "policy", agent)
        agg = aggregate([r.report for r in results])
        rows.append(("+".join(terms), agg))
    return rows


def check_reward_terms(terms):
    bad = set(terms) - set(REWARD_TERMS)
    if bad:
        raise ConfigError(f"unknown reward terms {sorted(bad)}")
