"""Deep Q-Network training loop with gated shaped rewards.

Epsilon-greedy behavior over a replay buffer with a periodically
synchronized target network. The shaping term from the reward model is
added to the stored reward only when the taken action matches the model's
suggestion; evaluation elsewhere reports raw outcomes, never rewards.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .logs import TrainingLog
from .nn import Adam, DEFAULT_ARCH, Dense, Network, SGD, parse_arch, scale_frames
from .render import FRAME_HEIGHT, FRAME_WIDTH, STACK_SIZE, Observation, features, push_frame, render
from .rewards import RewardConfig, RewardModel, basic_reward, compose
from .sim import IntersectionEnv, MetaAction, ScenarioConfig

INPUT_SHAPE = (STACK_SIZE, FRAME_HEIGHT, FRAME_WIDTH)
N_ACTIONS = 3

DQN_LOG_COLUMNS = ("step", "episode", "ep_return", "ep_length", "loss",
                   "epsilon", "matched_fraction")

EnvFactory = Callable[[int], IntersectionEnv]


class Transition(NamedTuple):
    obs: Observation
    action: int
    reward: float
    next_obs: Observation
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, item: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._next] = item
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        if batch_size > len(self._items):
            raise ValueError(f"cannot sample {batch_size} from buffer of {len(self._items)}")
        idx = rng.integers(0, len(self._items), size=batch_size)
        return [self._items[i] for i in idx]

    def snapshot(self) -> list[Transition]:
        """Items ordered oldest first (for FIFO tests)."""
        return self._items[self._next:] + self._items[:self._next] \
            if len(self._items) == self.capacity else list(self._items)


@dataclass(frozen=True)
class DqnConfig:
    n_steps: int = 8000
    learning_rate: float = 5e-4
    gamma: float = 0.95
    batch_size: int = 32
    buffer_capacity: int = 15000
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_steps: int = 6000
    target_sync_period: int = 200
    warmup_steps: int = 500
    optimizer: str = "adam"
    arch: str = DEFAULT_ARCH

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        for eps in (self.epsilon_start, self.epsilon_end):
            if not 0.0 <= eps <= 1.0:
                raise ValueError("epsilon bounds must lie in [0, 1]")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size cannot exceed buffer_capacity")
        if self.warmup_steps < self.batch_size:
            raise ValueError("warmup must cover at least one batch")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def epsilon_at(cfg: DqnConfig, step: int) -> float:
    """Linear decay from epsilon_start to epsilon_end, then constant."""
    if step >= cfg.epsilon_decay_steps:
        return cfg.epsilon_end
    frac = step / cfg.epsilon_decay_steps
    return cfg.epsilon_start + (cfg.epsilon_end - cfg.epsilon_start) * frac


def build_q_network(arch: str, seed: int, dtype=np.float32) -> Network:
    layers = parse_arch(arch) + [Dense(N_ACTIONS)]
    return Network(layers, INPUT_SHAPE, seed=seed, dtype=dtype)


def obs_to_input(obs: Observation) -> np.ndarray:
    return scale_frames(obs.stacked())[None]


def batch_to_input(observations: Sequence[Observation]) -> np.ndarray:
    return scale_frames(np.stack([o.stacked() for o in observations]))


def q_values(net: Network, obs: Observation) -> np.ndarray:
    return net.forward(obs_to_input(obs))[0]


def select_action(qnet: Network, obs: Observation, epsilon: float,
                  rng: np.random.Generator) -> MetaAction:
    """Epsilon-greedy over Q-values; greedy ties go to the lowest index."""
    if rng.random() < epsilon:
        return MetaAction(int(rng.integers(N_ACTIONS)))
    return MetaAction(int(np.argmax(q_values(qnet, obs))))


def td_targets(batch: Sequence[Transition], target_net: Network, gamma: float) -> np.ndarray:
    """y = r for terminal transitions, else r + gamma * max_a' Q_target."""
    if not batch:
        raise ValueError("empty batch")
    next_q = target_net.forward(batch_to_input([t.next_obs for t in batch]))
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    nonterminal = np.array([0.0 if t.terminal else 1.0 for t in batch])
    return rewards + gamma * next_q.max(axis=1).astype(np.float64) * nonterminal


def make_env_factory(scenario: ScenarioConfig) -> EnvFactory:
    return lambda seed: IntersectionEnv(replace(scenario, seed=int(seed)))


def derive_seeds(seed: int, n: int = 3) -> list[int]:
    """Stable per-component sub-seeds from one master seed."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]


def train_dqn(env_factory: EnvFactory, reward_model: RewardModel | None,
              cfg: DqnConfig, seed: int,
              reward_cfg: RewardConfig | None = None) -> tuple[Network, TrainingLog]:
    """Run the full decision-step training loop.

    One environment step, one (post-warmup) gradient step per decision
    step; the target network is refreshed every target_sync_period steps.
    Episode rows (shaped return, length, mean loss, epsilon, fraction of
    steps agreeing with the reward model) are appended to the log.
    """
    cfg.validate()
    reward_cfg = reward_cfg or RewardConfig()
    net_seed, act_seed, env_seed = derive_seeds(seed)
    qnet = build_q_network(cfg.arch, net_seed)
    target = qnet.clone()
    opt = Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    act_rng = np.random.default_rng(act_seed)
    env = env_factory(env_seed)
    log = TrainingLog(DQN_LOG_COLUMNS)

    state, obs = env.reset()
    episode = 0
    ep_return = 0.0
    ep_length = 0
    ep_matched = 0
    ep_losses: list[float] = []

    for step in range(1, cfg.n_steps + 1):
        epsilon = epsilon_at(cfg, step - 1)
        action = select_action(qnet, obs, epsilon, act_rng)
        model_out = reward_model(obs) if reward_model is not None else None
        state, outcome = env.step(action)
        next_obs = push_frame(obs, render(state), features(state))
        basic = basic_reward(outcome, reward_cfg)
        if model_out is None:
            reward = basic
        else:
            breakdown = compose(basic, model_out, action, reward_cfg)
            reward = breakdown.final
            ep_matched += int(breakdown.matched)
        terminal = outcome.collided or outcome.arrived
        buffer.add(Transition(obs, int(action), reward, next_obs, terminal))
        ep_return += reward
        ep_length += 1

        if step > cfg.warmup_steps and len(buffer) >= cfg.batch_size:
            batch = buffer.sample(cfg.batch_size, act_rng)
            y = td_targets(batch, target, cfg.gamma)
            x = batch_to_input([t.obs for t in batch])
            q = qnet.forward(x)
            rows = np.arange(len(batch))
            acts = np.array([t.action for t in batch])
            errors = q[rows, acts].astype(np.float64) - y
            loss = float(np.mean(errors ** 2))
            dq = np.zeros_like(q)
            dq[rows, acts] = (2.0 / len(batch)) * errors
            qnet.backward(dq)
            opt.update(qnet.params, qnet.grads)
            ep_losses.append(loss)

        if step % cfg.target_sync_period == 0:
            target.copy_params_from(qnet)

        if state.done:
            mean_loss = float(np.mean(ep_losses)) if ep_losses else 0.0
            matched_fraction = ep_matched / ep_length if reward_model is not None else 0.0
            log.add_row(step=step, episode=episode, ep_return=ep_return,
                        ep_length=ep_length, loss=mean_loss, epsilon=epsilon,
                        matched_fraction=matched_fraction)
            episode += 1
            ep_return, ep_length, ep_matched = 0.0, 0, 0
            ep_losses = []
            state, obs = env.reset()
        else:
            obs = next_obs

    return qnet, log
