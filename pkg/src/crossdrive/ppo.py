"""Proximal Policy Optimization with the same gated reward shaping as DQN.

Rollouts of fixed horizon are collected with a softmax policy, advantages
come from generalized advantage estimation, and updates minimize the
clipped surrogate plus a weighted value regression over several shuffled
minibatch epochs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dqn import EnvFactory, INPUT_SHAPE, N_ACTIONS, derive_seeds, obs_to_input
from .logs import TrainingLog
from .nn import (Adam, DEFAULT_ARCH, Dense, Network, log_softmax, parse_arch,
                 scale_frames, split_arch_at_flatten)
from .render import features, push_frame, render
from .rewards import RewardConfig, RewardModel, basic_reward, compose
from .sim import MetaAction

PPO_LOG_COLUMNS = ("step", "episode", "ep_return", "ep_length", "loss", "epsilon",
                   "matched_fraction", "clip_fraction", "policy_loss", "value_loss")


@dataclass(frozen=True)
class PpoConfig:
    n_steps: int = 8000
    rollout_horizon: int = 256
    learning_rate: float = 5e-4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    normalize_advantages: bool = True
    arch: str = DEFAULT_ARCH

    def validate(self) -> None:
        if not 0.0 < self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in (0, 1]")
        if not 0.0 < self.clip_range < 1.0:
            raise ValueError("clip_range must lie in (0, 1)")
        if self.minibatch_size > self.rollout_horizon:
            raise ValueError("minibatch_size cannot exceed rollout_horizon")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")


class ActorCritic:
    """Policy and value heads on a shared convolutional trunk."""

    def __init__(self, arch: str, seed: int, dtype=np.float32):
        trunk_spec, head_spec = split_arch_at_flatten(arch)
        trunk_seed, policy_seed, value_seed = derive_seeds(seed)
        self.trunk = Network(parse_arch(trunk_spec), INPUT_SHAPE,
                             seed=trunk_seed, dtype=dtype)
        feat_shape = self.trunk.output_shape
        head_layers = parse_arch(head_spec) if head_spec else []
        self.policy = Network(head_layers + [Dense(N_ACTIONS)], feat_shape,
                              seed=policy_seed, dtype=dtype)
        head_layers_v = parse_arch(head_spec) if head_spec else []
        self.value = Network(head_layers_v + [Dense(1)], feat_shape,
                             seed=value_seed, dtype=dtype)

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        h = self.trunk.forward(x)
        logits = self.policy.forward(h)
        values = self.value.forward(h)[:, 0]
        return logits, values

    def backward(self, dlogits: np.ndarray, dvalues: np.ndarray) -> None:
        _, dh_policy = self.policy.backward(dlogits, need_input_grad=True)
        _, dh_value = self.value.backward(dvalues[:, None], need_input_grad=True)
        self.trunk.backward(dh_policy + dh_value)

    @property
    def nets(self) -> list[Network]:
        return [self.trunk, self.policy, self.value]

    @property
    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets for p in net.params]

    @property
    def grads(self) -> list[np.ndarray]:
        return [g for net in self.nets for g in net.grads]


class RolloutBuffer:
    """Per-step storage for one collection phase, cleared after updates."""

    def __init__(self):
        self.obs_u8: list[np.ndarray] = []
        self.actions: list[int] = []
        self.log_probs_old: list[float] = []
        self.values: list[float] = []
        self.rewards: list[float] = []
        self.terminals: list[bool] = []
        self.bootstrap_value = 0.0

    def __len__(self) -> int:
        return len(self.actions)

    def add(self, obs_u8: np.ndarray, action: int, log_prob: float, value: float,
            reward: float, terminal: bool) -> None:
        if log_prob > 1e-9 or not np.isfinite(log_prob):
            raise ValueError(f"log probability must be finite and <= 0, got {log_prob}")
        self.obs_u8.append(obs_u8)
        self.actions.append(action)
        self.log_probs_old.append(log_prob)
        self.values.append(value)
        self.rewards.append(reward)
        self.terminals.append(terminal)

    def clear(self) -> None:
        self.__init__()


def gae(rewards: np.ndarray, values: np.ndarray, terminals: np.ndarray,
        gamma: float, lam: float, bootstrap_value: float = 0.0,
        normalize: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over one rollout.

    delta_t = r_t + gamma*V(s_{t+1})*(1-terminal_t) - V(s_t), accumulated
    backward with factor gamma*lam and truncated at episode ends.
    ``bootstrap_value`` stands in for V of the state following the last
    step (pass 0 if that step is terminal). Returns are advantages plus
    values. Optional normalization rescales advantages to zero mean and
    unit variance across the rollout.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminals = np.asarray(terminals)
    if not (len(rewards) == len(values) == len(terminals)):
        raise ValueError("rewards, values and terminals must have equal length")
    n = len(rewards)
    advantages = np.zeros(n, dtype=np.float64)
    running = 0.0
    for t in range(n - 1, -1, -1):
        next_value = bootstrap_value if t == n - 1 else values[t + 1]
        nonterminal = 0.0 if terminals[t] else 1.0
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        advantages[t] = running
    returns = advantages + values
    if normalize:
        advantages = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    return advantages, returns


def clipped_surrogate(ratio: np.ndarray, advantages: np.ndarray,
                      clip_range: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample min(r*A, clip(r)*A) and the unclipped-gradient mask."""
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_range, 1.0 + clip_range) * advantages
    surrogate = np.minimum(unclipped, clipped)
    inside = (ratio > 1.0 - clip_range) & (ratio < 1.0 + clip_range)
    active = (unclipped <= clipped) | inside
    return surrogate, active


def ppo_update(ac: ActorCritic, optimizer: Adam, buffer: RolloutBuffer,
               cfg: PpoConfig, rng: np.random.Generator) -> dict[str, float]:
    """Clipped-surrogate policy and value update over shuffled minibatches.

    Returns mean ratio, clip fraction, both losses (averaged over all
    minibatches) and the largest |ratio - 1| seen during the first epoch,
    which must be ~0 because no parameters have moved yet. Raises
    FloatingPointError on a non-finite loss.
    """
    n = len(buffer)
    if n == 0:
        raise ValueError("rollout buffer is empty")
    obs_u8 = np.stack(buffer.obs_u8)
    actions = np.asarray(buffer.actions)
    advantages, returns = gae(buffer.rewards, buffer.values, buffer.terminals,
                              cfg.gamma, cfg.gae_lambda,
                              bootstrap_value=buffer.bootstrap_value,
                              normalize=cfg.normalize_advantages)
    eps = cfg.clip_range

    # Re-evaluate old-policy log-probs under the (still unchanged) current
    # parameters using the exact minibatch partition epoch 0 will see.
    # Rollout-time values were computed with batch size 1 and differ by a
    # few float32 ulps from minibatched forwards; this keeps pre-update
    # importance ratios identically 1.
    perm0 = rng.permutation(n)
    logp_old = np.empty(n, dtype=np.float64)
    for start in range(0, n, cfg.minibatch_size):
        mb = perm0[start:start + cfg.minibatch_size]
        logits, _ = ac.forward(scale_frames(obs_u8[mb]))
        logp_all = log_softmax(logits.astype(np.float64))
        logp_old[mb] = logp_all[np.arange(len(mb)), actions[mb]]

    sums = {"ratio": 0.0, "clip": 0.0, "policy": 0.0, "value": 0.0}
    epoch0_ratio_err = 0.0
    batches = 0
    for epoch in range(cfg.epochs):
        perm = perm0 if epoch == 0 else rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            mb = perm[start:start + cfg.minibatch_size]
            b = len(mb)
            x = scale_frames(obs_u8[mb])
            logits, values = ac.forward(x)
            logp_all = log_softmax(logits.astype(np.float64))
            rows = np.arange(b)
            logp = logp_all[rows, actions[mb]]
            ratio = np.exp(logp - logp_old[mb])
            if epoch == 0 and batches < 1:
                epoch0_ratio_err = max(epoch0_ratio_err,
                                       float(np.max(np.abs(ratio - 1.0))))
            adv = advantages[mb]
            surrogate, active = clipped_surrogate(ratio, adv, eps)
            policy_loss = -float(surrogate.mean())
            verr = values.astype(np.float64) - returns[mb]
            value_loss = float(np.mean(verr ** 2))
            probs = np.exp(logp_all)
            total = policy_loss + cfg.value_coef * value_loss
            if cfg.entropy_coef:
                entropy = -float((probs * logp_all).sum(axis=1).mean())
                total -= cfg.entropy_coef * entropy
            if not np.isfinite(total):
                raise FloatingPointError(f"non-finite PPO loss {total}")

            dsurr_dlogp = np.where(active, ratio * adv, 0.0)
            onehot = np.zeros_like(probs)
            onehot[rows, actions[mb]] = 1.0
            dlogits = (-dsurr_dlogp / b)[:, None] * (onehot - probs)
            if cfg.entropy_coef:
                # d(-entropy)/dlogits, averaged over the batch
                ent_rows = (probs * logp_all).sum(axis=1, keepdims=True)
                dlogits += (cfg.entropy_coef / b) * probs * (logp_all - ent_rows)
            dvalues = cfg.value_coef * (2.0 / b) * verr
            ac.backward(dlogits.astype(np.float32), dvalues.astype(np.float32))
            optimizer.update(ac.params, ac.grads)

            sums["ratio"] += float(ratio.mean())
            sums["clip"] += float(np.mean(np.abs(ratio - 1.0) > eps))
            sums["policy"] += policy_loss
            sums["value"] += value_loss
            batches += 1
    return {
        "mean_ratio": sums["ratio"] / batches,
        "clip_fraction": sums["clip"] / batches,
        "policy_loss": sums["policy"] / batches,
        "value_loss": sums["value"] / batches,
        "epoch0_ratio_err": epoch0_ratio_err,
    }


def train_ppo(env_factory: EnvFactory, reward_model: RewardModel | None,
              cfg: PpoConfig, seed: int,
              reward_cfg: RewardConfig | None = None) -> tuple[ActorCritic, TrainingLog]:
    """Alternate rollout collection and PPO updates for n_steps total."""
    cfg.validate()
    reward_cfg = reward_cfg or RewardConfig()
    ac_seed, act_seed, env_seed = derive_seeds(seed)
    ac = ActorCritic(cfg.arch, ac_seed)
    opt = Adam(cfg.learning_rate)
    act_rng = np.random.default_rng(act_seed)
    env = env_factory(env_seed)
    log = TrainingLog(PPO_LOG_COLUMNS)
    log.meta["max_prob_sum_err"] = 0.0
    log.meta["max_epoch0_ratio_err"] = 0.0

    state, obs = env.reset()
    episode = 0
    ep_return = 0.0
    ep_length = 0
    ep_matched = 0
    last_stats = {"mean_ratio": 1.0, "clip_fraction": 0.0,
                  "policy_loss": 0.0, "value_loss": 0.0}
    steps_done = 0

    while steps_done < cfg.n_steps:
        horizon = min(cfg.rollout_horizon, cfg.n_steps - steps_done)
        buffer = RolloutBuffer()
        last_terminal = False
        for _ in range(horizon):
            logits, values = ac.forward(obs_to_input(obs))
            logp_all = log_softmax(logits.astype(np.float64))[0]
            probs = np.exp(logp_all)
            err = abs(float(probs.sum()) - 1.0)
            if err > log.meta["max_prob_sum_err"]:
                log.meta["max_prob_sum_err"] = err
            action = int(act_rng.choice(N_ACTIONS, p=probs / probs.sum()))
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
            buffer.add(obs.stacked(), action, float(logp_all[action]),
                       float(values[0]), reward, state.done)
            ep_return += reward
            ep_length += 1
            steps_done += 1
            last_terminal = state.done
            if state.done:
                log.add_row(step=steps_done, episode=episode, ep_return=ep_return,
                            ep_length=ep_length, loss=last_stats["policy_loss"],
                            epsilon=0.0, matched_fraction=(
                                ep_matched / ep_length if reward_model is not None else 0.0),
                            clip_fraction=last_stats["clip_fraction"],
                            policy_loss=last_stats["policy_loss"],
                            value_loss=last_stats["value_loss"])
                episode += 1
                ep_return, ep_length, ep_matched = 0.0, 0, 0
                state, obs = env.reset()
            else:
                obs = next_obs
        if last_terminal:
            buffer.bootstrap_value = 0.0
        else:
            _, tail_values = ac.forward(obs_to_input(obs))
            buffer.bootstrap_value = float(tail_values[0])
        last_stats = ppo_update(ac, opt, buffer, cfg, act_rng)
        log.meta["max_epoch0_ratio_err"] = max(log.meta["max_epoch0_ratio_err"],
                                               last_stats["epoch0_ratio_err"])
    return ac, log
