"""Flat INI run configuration: [env], [reward], [dqn], [ppo], [run].

Every key has a default, unknown keys are rejected by name, and
``resolved_config_text`` reprints the fully resolved state so a run
directory always contains an exact recipe for reproducing itself.
The master seed in [run] drives training; [env] seed only matters when
an environment is used standalone (e.g. frame export).
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace
from pathlib import Path

from .dqn import DqnConfig
from .ppo import PpoConfig
from .rewards import EmbeddingRewardModel, RewardConfig, RewardModel, RuleOracleModel
from .sim import ScenarioConfig


class ConfigError(ValueError):
    """Run configuration file is invalid; the message names the key."""


REWARD_MODELS = ("rule", "embedding", "none")
ALGORITHMS = ("dqn", "ppo")


@dataclass(frozen=True)
class RewardSpec:
    model: str = "rule"
    assets: str = ""
    cfg: RewardConfig = RewardConfig()

    def build_model(self) -> RewardModel | None:
        if self.model == "none":
            return None
        if self.model == "rule":
            return RuleOracleModel()
        if not self.assets:
            raise ConfigError("reward.assets: path required when reward.model = embedding")
        if not Path(self.assets).exists():
            raise ConfigError(f"reward.assets: file not found: {self.assets}")
        return EmbeddingRewardModel.from_file(self.assets)


@dataclass(frozen=True)
class RunConfig:
    env: ScenarioConfig
    reward: RewardSpec
    dqn: DqnConfig
    ppo: PpoConfig
    algorithm: str = "dqn"
    steps: int | None = None
    seed: int = 0
    out_dir: str = "runs/out"

    def effective_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return self.dqn.n_steps if self.algorithm == "dqn" else self.ppo.n_steps


_ENV_KEYS = ("duration_s", "initial_vehicle_count", "spawn_probability",
             "sim_frequency_hz", "policy_frequency_hz", "seed", "target_speeds")
_REWARD_KEYS = ("r_speed", "r_collision", "r_destination", "w_c",
                "efficient_speed_threshold", "model", "assets")
_DQN_KEYS = ("n_steps", "learning_rate", "gamma", "batch_size", "buffer_capacity",
             "epsilon_start", "epsilon_end", "epsilon_decay_steps",
             "target_sync_period", "warmup_steps", "optimizer", "arch")
_PPO_KEYS = ("n_steps", "rollout_horizon", "learning_rate", "gamma", "gae_lambda",
             "clip_range", "epochs", "minibatch_size", "value_coef", "entropy_coef",
             "normalize_advantages", "arch")
_RUN_KEYS = ("algorithm", "steps", "seed", "out_dir")
_SECTIONS = {"env": _ENV_KEYS, "reward": _REWARD_KEYS, "dqn": _DQN_KEYS,
             "ppo": _PPO_KEYS, "run": _RUN_KEYS}


def _typed(section: str, key: str, raw: str, kind: type):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(
            f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}") from None


def _parse_target_speeds(raw: str) -> tuple[float, ...]:
    try:
        values = tuple(float(tok) for tok in raw.split(",") if tok.strip())
    except ValueError:
        raise ConfigError(f"env.target_speeds: cannot parse {raw!r}") from None
    if not values:
        raise ConfigError("env.target_speeds: at least one speed required")
    return values


def load_run_config(path: str | Path, seed_override: int | None = None,
                    out_override: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {section}.{key}")

    def get(section: str, key: str, default, kind: type):
        if parser.has_option(section, key):
            return _typed(section, key, parser.get(section, key), kind)
        return default

    env_default = ScenarioConfig()
    target_raw = parser.get("env", "target_speeds", fallback=None)
    env = ScenarioConfig(
        duration_s=get("env", "duration_s", env_default.duration_s, float),
        initial_vehicle_count=get("env", "initial_vehicle_count",
                                  env_default.initial_vehicle_count, int),
        spawn_probability=get("env", "spawn_probability",
                              env_default.spawn_probability, float),
        sim_frequency_hz=get("env", "sim_frequency_hz",
                             env_default.sim_frequency_hz, int),
        policy_frequency_hz=get("env", "policy_frequency_hz",
                                env_default.policy_frequency_hz, int),
        seed=get("env", "seed", env_default.seed, int),
        target_speeds=(_parse_target_speeds(target_raw) if target_raw is not None
                       else env_default.target_speeds),
    )
    try:
        env.validate()
    except ValueError as exc:
        raise ConfigError(f"env: {exc}") from exc

    model = get("reward", "model", "rule", str).strip().lower()
    if model not in REWARD_MODELS:
        raise ConfigError(f"reward.model: expected one of {REWARD_MODELS}, got {model!r}")
    reward_cfg = RewardConfig(
        r_speed=get("reward", "r_speed", 1.0, float),
        r_collision=get("reward", "r_collision", -5.0, float),
        r_destination=get("reward", "r_destination", 2.0, float),
        w_c=get("reward", "w_c", 1.2, float),
        efficient_speed_threshold=get("reward", "efficient_speed_threshold", 7.0, float),
    )
    try:
        reward_cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"reward: {exc}") from exc
    reward = RewardSpec(model=model, assets=get("reward", "assets", "", str),
                        cfg=reward_cfg)

    dqn_default = DqnConfig()
    dqn = DqnConfig(
        n_steps=get("dqn", "n_steps", dqn_default.n_steps, int),
        learning_rate=get("dqn", "learning_rate", dqn_default.learning_rate, float),
        gamma=get("dqn", "gamma", dqn_default.gamma, float),
        batch_size=get("dqn", "batch_size", dqn_default.batch_size, int),
        buffer_capacity=get("dqn", "buffer_capacity", dqn_default.buffer_capacity, int),
        epsilon_start=get("dqn", "epsilon_start", dqn_default.epsilon_start, float),
        epsilon_end=get("dqn", "epsilon_end", dqn_default.epsilon_end, float),
        epsilon_decay_steps=get("dqn", "epsilon_decay_steps",
                                dqn_default.epsilon_decay_steps, int),
        target_sync_period=get("dqn", "target_sync_period",
                               dqn_default.target_sync_period, int),
        warmup_steps=get("dqn", "warmup_steps", dqn_default.warmup_steps, int),
        optimizer=get("dqn", "optimizer", dqn_default.optimizer, str),
        arch=get("dqn", "arch", dqn_default.arch, str),
    )
    try:
        dqn.validate()
    except ValueError as exc:
        raise ConfigError(f"dqn: {exc}") from exc

    ppo_default = PpoConfig()
    ppo = PpoConfig(
        n_steps=get("ppo", "n_steps", ppo_default.n_steps, int),
        rollout_horizon=get("ppo", "rollout_horizon", ppo_default.rollout_horizon, int),
        learning_rate=get("ppo", "learning_rate", ppo_default.learning_rate, float),
        gamma=get("ppo", "gamma", ppo_default.gamma, float),
        gae_lambda=get("ppo", "gae_lambda", ppo_default.gae_lambda, float),
        clip_range=get("ppo", "clip_range", ppo_default.clip_range, float),
        epochs=get("ppo", "epochs", ppo_default.epochs, int),
        minibatch_size=get("ppo", "minibatch_size", ppo_default.minibatch_size, int),
        value_coef=get("ppo", "value_coef", ppo_default.value_coef, float),
        entropy_coef=get("ppo", "entropy_coef", ppo_default.entropy_coef, float),
        normalize_advantages=get("ppo", "normalize_advantages",
                                 ppo_default.normalize_advantages, bool),
        arch=get("ppo", "arch", ppo_default.arch, str),
    )
    try:
        ppo.validate()
    except ValueError as exc:
        raise ConfigError(f"ppo: {exc}") from exc

    algorithm = get("run", "algorithm", "dqn", str).strip().lower()
    if algorithm not in ALGORITHMS:
        raise ConfigError(f"run.algorithm: expected one of {ALGORITHMS}, got {algorithm!r}")
    steps = get("run", "steps", None, int)
    if steps is not None and steps < 0:
        raise ConfigError("run.steps: must be >= 0")
    rc = RunConfig(env=env, reward=reward, dqn=dqn, ppo=ppo, algorithm=algorithm,
                   steps=steps, seed=get("run", "seed", 0, int),
                   out_dir=get("run", "out_dir", "runs/out", str))
    if seed_override is not None:
        rc = replace(rc, seed=seed_override)
    if out_override is not None:
        rc = replace(rc, out_dir=out_override)
    return rc


def resolved_config_text(rc: RunConfig) -> str:
    """Canonical INI dump of a fully resolved run configuration."""
    env, rw, dqn, ppo = rc.env, rc.reward, rc.dqn, rc.ppo
    lines = [
        "[env]",
        f"duration_s = {env.duration_s!r}",
        f"initial_vehicle_count = {env.initial_vehicle_count}",
        f"spawn_probability = {env.spawn_probability!r}",
        f"sim_frequency_hz = {env.sim_frequency_hz}",
        f"policy_frequency_hz = {env.policy_frequency_hz}",
        f"seed = {env.seed}",
        "target_speeds = " + ",".join(repr(v) for v in env.target_speeds),
        "",
        "[reward]",
        f"r_speed = {rw.cfg.r_speed!r}",
        f"r_collision = {rw.cfg.r_collision!r}",
        f"r_destination = {rw.cfg.r_destination!r}",
        f"w_c = {rw.cfg.w_c!r}",
        f"efficient_speed_threshold = {rw.cfg.efficient_speed_threshold!r}",
        f"model = {rw.model}",
        f"assets = {rw.assets}",
        "",
        "[dqn]",
        f"n_steps = {dqn.n_steps}",
        f"learning_rate = {dqn.learning_rate!r}",
        f"gamma = {dqn.gamma!r}",
        f"batch_size = {dqn.batch_size}",
        f"buffer_capacity = {dqn.buffer_capacity}",
        f"epsilon_start = {dqn.epsilon_start!r}",
        f"epsilon_end = {dqn.epsilon_end!r}",
        f"epsilon_decay_steps = {dqn.epsilon_decay_steps}",
        f"target_sync_period = {dqn.target_sync_period}",
        f"warmup_steps = {dqn.warmup_steps}",
        f"optimizer = {dqn.optimizer}",
        f"arch = {dqn.arch}",
        "",
        "[ppo]",
        f"n_steps = {ppo.n_steps}",
        f"rollout_horizon = {ppo.rollout_horizon}",
        f"learning_rate = {ppo.learning_rate!r}",
        f"gamma = {ppo.gamma!r}",
        f"gae_lambda = {ppo.gae_lambda!r}",
        f"clip_range = {ppo.clip_range!r}",
        f"epochs = {ppo.epochs}",
        f"minibatch_size = {ppo.minibatch_size}",
        f"value_coef = {ppo.value_coef!r}",
        f"entropy_coef = {ppo.entropy_coef!r}",
        f"normalize_advantages = {str(ppo.normalize_advantages).lower()}",
        f"arch = {ppo.arch}",
        "",
        "[run]",
        f"algorithm = {rc.algorithm}",
        f"steps = {rc.effective_steps()}",
        f"seed = {rc.seed}",
        f"out_dir = {rc.out_dir}",
    ]
    return "\n".join(lines) + "\n"
