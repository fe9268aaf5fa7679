"""Post-training evaluation: outcome rates, confusion matrix, trace export.

Episodes run greedily (argmax Q-values or logits, never sampled) on fresh
environments seeded with ``seed XOR episode_index``, so a report is a pure
function of (weights, seed). Speeds are pooled across every decision step
of every episode for the mean-speed metric.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dqn import EnvFactory, obs_to_input, q_values
from .fileio import atomic_write_text
from .nn import Network
from .ppo import ActorCritic
from .render import Observation, features, push_frame, render
from .rewards import RewardModel
from .svgplot import line_plot

#: policy protocol: observation -> (action, per-action values for tracing)
Policy = Callable[[Observation], tuple[int, np.ndarray]]

OUTCOMES = ("success", "collision", "timeout")


@dataclass(frozen=True)
class EpisodeRecord:
    outcome: str
    length: int
    speeds: list[float]
    actions: list[int]
    suggested: list[int]
    q_values: list[list[float]]
    positions: list[dict]   # [{"vid": id, "points": [[t, x, y], ...]}, ...]


@dataclass(frozen=True)
class EvalReport:
    episodes: int
    success_count: int
    collision_count: int
    timeout_count: int
    success_rate: float
    collision_rate: float
    timeout_rate: float
    mean_speed: float
    per_episode: list[EpisodeRecord]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def write(self, path: str | Path) -> None:
        atomic_write_text(path, self.to_json())


def load_report(path: str | Path) -> EvalReport:
    raw = json.loads(Path(path).read_text())
    raw["per_episode"] = [EpisodeRecord(**rec) for rec in raw["per_episode"]]
    return EvalReport(**raw)


class GreedyQPolicy:
    """argmax over Q-values; the traced vector is the Q-values."""

    def __init__(self, net: Network):
        self.net = net

    def __call__(self, obs: Observation) -> tuple[int, np.ndarray]:
        q = q_values(self.net, obs)
        return int(np.argmax(q)), q


class GreedyLogitsPolicy:
    """argmax over policy logits; the traced vector is the logits."""

    def __init__(self, ac: ActorCritic):
        self.ac = ac

    def __call__(self, obs: Observation) -> tuple[int, np.ndarray]:
        logits, _ = self.ac.forward(obs_to_input(obs))
        return int(np.argmax(logits[0])), logits[0]


class ConstantPolicy:
    """Scripted policy that always takes one action."""

    def __init__(self, action: int):
        self.action = int(action)

    def __call__(self, obs: Observation) -> tuple[int, np.ndarray]:
        values = np.zeros(3)
        values[self.action] = 1.0
        return self.action, values


class ObeySuggestionPolicy:
    """Scripted policy that always follows the reward model's suggestion."""

    def __init__(self, model: RewardModel):
        self.model = model

    def __call__(self, obs: Observation) -> tuple[int, np.ndarray]:
        out = self.model(obs)
        return int(out.suggested), out.scores


def aggregate(records: Sequence[EpisodeRecord]) -> EvalReport:
    """Fold per-episode records into counts, rates and the pooled mean speed."""
    episodes = len(records)
    if episodes == 0:
        raise ValueError("at least one episode required")
    success = sum(r.outcome == "success" for r in records)
    collision = sum(r.outcome == "collision" for r in records)
    timeout = sum(r.outcome == "timeout" for r in records)
    all_speeds = [v for r in records for v in r.speeds]
    return EvalReport(
        episodes=episodes,
        success_count=success,
        collision_count=collision,
        timeout_count=timeout,
        success_rate=success / episodes,
        collision_rate=collision / episodes,
        timeout_rate=timeout / episodes,
        mean_speed=float(np.mean(all_speeds)) if all_speeds else 0.0,
        per_episode=list(records),
    )


def evaluate(policy: Policy, env_factory: EnvFactory,
             reward_model: RewardModel | None, episodes: int, seed: int) -> EvalReport:
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    records = []
    for e in range(episodes):
        records.append(run_episode(policy, env_factory, reward_model, seed ^ e))
    return aggregate(records)


def run_episode(policy: Policy, env_factory: EnvFactory,
                reward_model: RewardModel | None, env_seed: int) -> EpisodeRecord:
    env = env_factory(env_seed)
    state, obs = env.reset()
    speeds: list[float] = []
    actions: list[int] = []
    suggested: list[int] = []
    traced: list[list[float]] = []
    positions: dict[int, list[list[float]]] = {}

    def record_positions(t: int) -> None:
        for veh in state.vehicles:
            positions.setdefault(veh.vid, []).append(
                [float(t), float(veh.x), float(veh.y)])

    record_positions(0)
    t = 0
    outcome = None
    while not state.done:
        action, values = policy(obs)
        if reward_model is not None:
            suggested.append(int(reward_model(obs).suggested))
        state, outcome = env.step(action)
        t += 1
        actions.append(int(action))
        traced.append([float(v) for v in values])
        speeds.append(float(outcome.ego_speed))
        record_positions(t)
        if not state.done:
            obs = push_frame(obs, render(state), features(state))
    if outcome.collided:
        label = "collision"
    elif outcome.arrived:
        label = "success"
    else:
        label = "timeout"
    pos_list = [{"vid": vid, "points": pts} for vid, pts in sorted(positions.items())]
    return EpisodeRecord(outcome=label, length=t, speeds=speeds, actions=actions,
                         suggested=suggested, q_values=traced, positions=pos_list)


def confusion(report: EvalReport) -> np.ndarray:
    """3x3 counts; rows are suggested actions, columns are taken actions."""
    counts = np.zeros((3, 3), dtype=np.int64)
    any_logged = False
    for rec in report.per_episode:
        if len(rec.suggested) != len(rec.actions):
            raise ValueError("episode lacks per-step suggestions")
        for s, a in zip(rec.suggested, rec.actions):
            counts[s, a] += 1
            any_logged = True
    if not any_logged and any(r.length for r in report.per_episode):
        raise ValueError("no suggestions were logged; evaluate with a reward model")
    return counts


def confusion_csv(counts: np.ndarray) -> str:
    header = "suggested\\taken,slower,idle,faster"
    lines = [header]
    for s, name in enumerate(("slower", "idle", "faster")):
        lines.append(name + "," + ",".join(str(int(v)) for v in counts[s]))
    return "\n".join(lines) + "\n"


def export_traces(report: EvalReport, episode_index: int,
                  out_dir: str | Path) -> list[Path]:
    """Write per-step CSVs and SVG plots for one episode.

    Emits speed, action, per-action value and per-vehicle trajectory
    traces; returns the list of written paths.
    """
    if not 0 <= episode_index < len(report.per_episode):
        raise IndexError(f"episode {episode_index} out of range "
                         f"(report has {len(report.per_episode)})")
    rec = report.per_episode[episode_index]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ts = list(range(1, rec.length + 1))
    written: list[Path] = []

    def _csv(name: str, header: str, rows: list[str]) -> None:
        p = out_dir / name
        atomic_write_text(p, "\n".join([header] + rows) + "\n")
        written.append(p)

    _csv("speed.csv", "t,speed", [f"{t},{v!r}" for t, v in zip(ts, rec.speeds)])
    _csv("actions.csv", "t,action", [f"{t},{a}" for t, a in zip(ts, rec.actions)])
    _csv("qvalues.csv", "t,q0,q1,q2",
         [f"{t},{q[0]!r},{q[1]!r},{q[2]!r}" for t, q in zip(ts, rec.q_values)])
    traj_rows = [f"{p['vid']},{pt[0]:g},{pt[1]!r},{pt[2]!r}"
                 for p in rec.positions for pt in p["points"]]
    _csv("trajectory.csv", "vid,t,x,y", traj_rows)

    speed_svg = out_dir / "speed.svg"
    line_plot([("ego speed", ts, rec.speeds)], speed_svg,
              title="Ego speed over time", xlabel="decision step", ylabel="m/s")
    written.append(speed_svg)
    actions_svg = out_dir / "actions.svg"
    line_plot([("action", ts, [float(a) for a in rec.actions])], actions_svg,
              title="Action taken over time", xlabel="decision step",
              ylabel="action id")
    written.append(actions_svg)
    q_svg = out_dir / "qvalues.svg"
    line_plot([(name, ts, [q[i] for q in rec.q_values])
               for i, name in enumerate(("slower", "idle", "faster"))], q_svg,
              title="Per-action values over time", xlabel="decision step",
              ylabel="value")
    written.append(q_svg)
    traj_svg = out_dir / "trajectory.svg"
    line_plot([(f"vehicle {p['vid']}", [pt[1] for pt in p["points"]],
                [pt[2] for pt in p["points"]]) for p in rec.positions], traj_svg,
              title="Trajectories", xlabel="x [m]", ylabel="y [m]", equal_axes=True)
    written.append(traj_svg)
    return written
