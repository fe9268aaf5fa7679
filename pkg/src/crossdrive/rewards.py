"""Basic reward, suggestion models and the gated shaped-reward composition.

The final reward adds a weighted similarity score on top of the basic
environment reward, but only when the agent's action matches the action
suggested by the reward model; otherwise the basic reward passes through
untouched. Two interchangeable suggestion backends are provided: a
deterministic time-to-conflict rule and a nearest-neighbor lookup over
exported (frame fingerprint, embedding) pairs scored by cosine similarity
against per-action text embeddings.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .render import Observation
from .sim import MetaAction, StepOutcome

CONFLICT_WINDOW_S = 2.0      # time-to-conflict overlap that triggers Slower
STALLED_SPEED_FLOOR = 0.5    # m/s floor when converting distance to time

FINGERPRINT_WIDTH = 32
FINGERPRINT_HEIGHT = 16
FINGERPRINT_SIZE = FINGERPRINT_WIDTH * FINGERPRINT_HEIGHT
EMB1_MAGIC = b"EMB1"


class DegenerateVectorError(ValueError):
    """Cosine similarity is undefined for zero-norm inputs."""


class AssetFormatError(ValueError):
    """Embedding asset file failed validation."""


class MissingAssetsError(RuntimeError):
    """The embedding backend was invoked without usable assets."""


@dataclass(frozen=True)
class RewardConfig:
    r_speed: float = 1.0
    r_collision: float = -5.0
    r_destination: float = 2.0
    w_c: float = 1.2
    efficient_speed_threshold: float = 7.0

    def validate(self) -> None:
        if not (self.r_collision < 0.0 < self.r_speed <= self.r_destination):
            raise ValueError("expected r_collision < 0 < r_speed <= r_destination")
        if self.w_c <= 0.0:
            raise ValueError("w_c must be positive")


@dataclass(frozen=True)
class RewardModelOutput:
    """Per-action scores plus the argmax suggestion.

    Ties break toward Slower (the lowest action index): when in doubt,
    prefer the cautious command.
    """

    suggested: MetaAction
    scores: np.ndarray

    @classmethod
    def from_scores(cls, scores: np.ndarray) -> "RewardModelOutput":
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (3,):
            raise ValueError(f"expected 3 scores, got shape {scores.shape}")
        return cls(suggested=MetaAction(int(np.argmax(scores))), scores=scores)


@dataclass(frozen=True)
class RewardBreakdown:
    basic: float
    shaping_score: float
    matched: bool
    final: float


RewardModel = Callable[[Observation], RewardModelOutput]


def basic_reward(outcome: StepOutcome, cfg: RewardConfig) -> float:
    """Collision, then arrival, then efficient speed, else nothing."""
    if outcome.collided:
        return cfg.r_collision
    if outcome.arrived:
        return cfg.r_destination
    if outcome.ego_speed >= cfg.efficient_speed_threshold:
        return cfg.r_speed
    return 0.0


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.dot(u, v) / (nu * nv))


def rule_oracle(feature_vec: np.ndarray) -> RewardModelOutput:
    """Suggest an action from time-to-conflict geometry.

    Slower when some approaching HV reaches the conflict zone within
    CONFLICT_WINDOW_S seconds of the ego (and the ego has not committed
    into the zone yet); Faster when the ego has passed the zone or no HV
    window overlaps; Idle only as a defensive fallback. Times are
    distance / max(speed, STALLED_SPEED_FLOOR).
    """
    vec = np.asarray(feature_vec, dtype=np.float64)
    ego_speed, ego_dist = float(vec[0]), float(vec[1])
    if ego_dist < 0.0:
        return _one_hot(MetaAction.FASTER)
    t_ego = ego_dist / max(ego_speed, STALLED_SPEED_FLOOR)
    for i in range(4):
        hv_dist = float(vec[2 + 2 * i])
        hv_speed = float(vec[3 + 2 * i])
        t_hv = hv_dist / max(hv_speed, STALLED_SPEED_FLOOR)
        if abs(t_hv - t_ego) <= CONFLICT_WINDOW_S:
            return _one_hot(MetaAction.SLOWER)
    return _one_hot(MetaAction.FASTER)


def _one_hot(action: MetaAction) -> RewardModelOutput:
    scores = np.zeros(3, dtype=np.float64)
    scores[int(action)] = 1.0
    return RewardModelOutput(suggested=action, scores=scores)


def fingerprint_frame(frame: np.ndarray) -> np.ndarray:
    """Mean-pool a (64, 128) frame by 4x4 blocks to a flat 512-byte code.

    Block means are exact in float64; ties at .5 round to even. The same
    formula is used by asset producers so nearest-neighbor lookups agree
    across tools.
    """
    if frame.shape != (4 * FINGERPRINT_HEIGHT, 4 * FINGERPRINT_WIDTH):
        raise ValueError(f"expected (64, 128) frame, got {frame.shape}")
    blocks = frame.reshape(FINGERPRINT_HEIGHT, 4, FINGERPRINT_WIDTH, 4).astype(np.float64)
    pooled = blocks.mean(axis=(1, 3))
    return np.rint(pooled).astype(np.uint8).reshape(-1)


@dataclass(frozen=True)
class EmbeddingAssets:
    """Per-action text embeddings plus a (fingerprint, embedding) bank."""

    dim: int
    text_embeddings: np.ndarray      # (3, dim) float32, row index = action id
    bank_fingerprints: np.ndarray    # (n, 512) uint8
    bank_embeddings: np.ndarray      # (n, dim) float32

    def validate(self) -> None:
        if self.dim <= 0:
            raise AssetFormatError("embedding dimension must be positive")
        if self.text_embeddings.shape != (3, self.dim):
            raise AssetFormatError(
                f"text embeddings must be (3, {self.dim}), got {self.text_embeddings.shape}")
        if not np.all(np.isfinite(self.text_embeddings)):
            raise AssetFormatError("text embeddings contain non-finite entries")
        n = self.bank_embeddings.shape[0]
        if self.bank_fingerprints.shape != (n, FINGERPRINT_SIZE):
            raise AssetFormatError("fingerprint block shape mismatch")
        if self.bank_embeddings.shape != (n, self.dim):
            raise AssetFormatError("bank embedding dimension mismatch")
        if n and not np.all(np.isfinite(self.bank_embeddings)):
            raise AssetFormatError("bank embeddings contain non-finite entries")


def save_assets(assets: EmbeddingAssets, path: str | Path) -> None:
    assets.validate()
    out = bytearray()
    out += EMB1_MAGIC
    out += struct.pack("<II", assets.dim, 3)
    for action_id in range(3):
        out += struct.pack("<B", action_id)
        out += assets.text_embeddings[action_id].astype("<f4").tobytes()
    out += struct.pack("<I", assets.bank_embeddings.shape[0])
    for fp, emb in zip(assets.bank_fingerprints, assets.bank_embeddings):
        out += fp.astype(np.uint8).tobytes()
        out += emb.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_assets(path: str | Path) -> EmbeddingAssets:
    data = Path(path).read_bytes()
    if data[:4] != EMB1_MAGIC:
        raise AssetFormatError(f"{path}: bad magic {data[:4]!r}")
    pos = 4
    try:
        dim, text_count = struct.unpack_from("<II", data, pos)
        pos += 8
        if dim == 0:
            raise AssetFormatError(f"{path}: embedding dimension must be > 0")
        if text_count != 3:
            raise AssetFormatError(f"{path}: expected 3 text records, got {text_count}")
        texts = np.zeros((3, dim), dtype=np.float32)
        seen: set[int] = set()
        for _ in range(3):
            (action_id,) = struct.unpack_from("<B", data, pos)
            pos += 1
            texts[action_id] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
            pos += 4 * dim
            seen.add(action_id)
        if seen != {0, 1, 2}:
            raise AssetFormatError(f"{path}: text action ids {sorted(seen)} != [0, 1, 2]")
        (bank_count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        fps = np.zeros((bank_count, FINGERPRINT_SIZE), dtype=np.uint8)
        embs = np.zeros((bank_count, dim), dtype=np.float32)
        for i in range(bank_count):
            fps[i] = np.frombuffer(data, dtype=np.uint8, count=FINGERPRINT_SIZE, offset=pos)
            pos += FINGERPRINT_SIZE
            embs[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
            pos += 4 * dim
    except struct.error as exc:
        raise AssetFormatError(f"{path}: truncated file ({exc})") from exc
    if pos != len(data):
        raise AssetFormatError(f"{path}: {len(data) - pos} trailing bytes")
    assets = EmbeddingAssets(dim=int(dim), text_embeddings=texts,
                             bank_fingerprints=fps, bank_embeddings=embs)
    assets.validate()
    return assets


def embedding_model(obs: Observation, assets: EmbeddingAssets) -> RewardModelOutput:
    """Score actions by cosine between a looked-up image embedding and
    the per-action text embeddings.

    The image embedding is the bank entry nearest (L2 over fingerprints)
    to the fingerprint of the newest frame; ties pick the earliest entry.
    """
    if assets.bank_embeddings.shape[0] == 0:
        raise MissingAssetsError("embedding bank is empty; export assets first")
    fp = fingerprint_frame(obs.frames[-1]).astype(np.int32)
    diffs = assets.bank_fingerprints.astype(np.int32) - fp
    idx = int(np.argmin(np.einsum("ij,ij->i", diffs, diffs)))
    image_embedding = assets.bank_embeddings[idx]
    scores = np.array([cosine(image_embedding, assets.text_embeddings[a])
                       for a in range(3)])
    return RewardModelOutput.from_scores(scores)


def compose(basic: float, model_out: RewardModelOutput, taken: MetaAction | int,
            cfg: RewardConfig) -> RewardBreakdown:
    """Gate the shaping term on agreement with the suggested action."""
    matched = MetaAction(int(taken)) == model_out.suggested
    shaping_score = float(model_out.scores[int(model_out.suggested)])
    final = basic + cfg.w_c * shaping_score if matched else basic
    return RewardBreakdown(basic=basic, shaping_score=shaping_score,
                           matched=matched, final=final)


class RuleOracleModel:
    """Suggestion backend backed by the time-to-conflict rule."""

    def __call__(self, obs: Observation) -> RewardModelOutput:
        return rule_oracle(obs.features)


class EmbeddingRewardModel:
    """Suggestion backend backed by exported embedding assets."""

    def __init__(self, assets: EmbeddingAssets):
        assets.validate()
        self.assets = assets

    @classmethod
    def from_file(cls, path: str | Path) -> "EmbeddingRewardModel":
        return cls(load_assets(path))

    def __call__(self, obs: Observation) -> RewardModelOutput:
        return embedding_model(obs, self.assets)
