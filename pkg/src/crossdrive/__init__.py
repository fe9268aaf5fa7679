"""Intersection RL at desk scale: simulator, shaped rewards, DQN/PPO, evaluation."""

from .sim import (IntersectionEnv, MetaAction, ScenarioConfig, SimState,
                  StepOutcome, VehicleState, hv_policy)
from .render import Observation, features, push_frame, read_pgm, render, write_pgm
from .rewards import (EmbeddingAssets, EmbeddingRewardModel, RewardBreakdown,
                      RewardConfig, RewardModelOutput, RuleOracleModel,
                      basic_reward, compose, cosine, embedding_model,
                      fingerprint_frame, load_assets, rule_oracle, save_assets)
from .nn import (Adam, Conv2D, Dense, Flatten, Network, ReLU, SGD, Softmax,
                 load_weights, parse_arch, save_weights)
from .dqn import (DqnConfig, ReplayBuffer, Transition, build_q_network,
                  epsilon_at, make_env_factory, select_action, td_targets,
                  train_dqn)
from .ppo import ActorCritic, PpoConfig, RolloutBuffer, gae, ppo_update, train_ppo
from .evaluate import (ConstantPolicy, EvalReport, GreedyLogitsPolicy,
                       GreedyQPolicy, ObeySuggestionPolicy, confusion,
                       evaluate, export_traces)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
