"""Deterministic synthetic instances and Bradley-Terry preference sampling.

Randomness comes from :class:`CounterRNG`, a counter-based SplitMix64
stream: draw ``i`` of a stream is ``mix64(key + (i + 1) * GOLDEN)`` where
``key = mix64(seed ^ fnv1a64(stream_name))``. Uniforms are
``(u >> 11) * 2**-53``, integers in ``[0, n)`` are ``floor(uniform * n)``,
and normals use Box-Muller on consecutive uniform pairs. Everything is
plain 64-bit integer arithmetic, so any language can reproduce the streams.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import PreferencePair
from .oracle import RewardModel
from .policy import ReferencePolicy

GENERATOR_VERSION = "spolab-datagen/1"

_MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode():
        h = ((h ^ byte) * 0x100000001B3) & _MASK
    return h


def mix64(z):
    """SplitMix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class CounterRNG:
    """Stateless-per-draw random stream addressed by (seed, stream name, counter)."""

    def __init__(self, seed: int, stream: str):
        if not 0 <= seed <= _MASK:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = seed
        self.stream = stream
        self.key = int(mix64(np.array([seed ^ fnv1a64(stream)], dtype=np.uint64))[0])
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return mix64(np.uint64(self.key) + idx * np.uint64(GOLDEN))

    def uniform(self, n: int) -> np.ndarray:
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def integers(self, n: int, high) -> np.ndarray:
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n).reshape(n, 2)
        return np.sqrt(-2.0 * np.log1p(-u[:, 0])) * np.cos(2.0 * math.pi * u[:, 1])


@dataclass(frozen=True)
class InstanceSpec:
    n_prompts: int = 4
    n_responses: int = 8
    reward_scale: float = 1.0
    seed: int = 0
    feature_dim: int | None = None
    feature_collision: float = 0.0

    def __post_init__(self):
        if self.n_prompts < 1:
            raise ValueError("n_prompts must be positive")
        if self.n_responses < 2:
            raise ValueError("n_responses must be at least 2")
        if not (self.reward_scale >= 0 and math.isfinite(self.reward_scale)):
            raise ValueError("reward_scale must be finite and non-negative")
        if not 0 <= self.seed <= _MASK:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.feature_dim is not None and self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if not 0.0 <= self.feature_collision <= 1.0:
            raise ValueError("feature_collision must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Instance:
    spec: InstanceSpec
    reward: RewardModel
    reference: ReferencePolicy
    designated_pairs: tuple[PreferencePair, ...]
    features: np.ndarray | None = None

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(GENERATOR_VERSION.encode())
        h.update(self.reward.rewards.tobytes())
        h.update(self.reference.values.tobytes())
        if self.features is not None:
            h.update(self.features.tobytes())
        return h.hexdigest()

    def manifest(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "generator_version": GENERATOR_VERSION,
            "designated_pairs": [p.to_dict() for p in self.designated_pairs],
            "digest": self.digest(),
        }


def _designated_pairs(rewards: np.ndarray) -> tuple[PreferencePair, ...]:
    """Per prompt: highest-reward response beats lowest-reward response (first index on ties)."""
    pairs = []
    for x, row in enumerate(rewards):
        w, l = int(np.argmax(row)), int(np.argmin(row))
        if w == l:
            l = (w + 1) % row.size
        pairs.append(PreferencePair(x, w, l))
    return tuple(pairs)


def _features(spec: InstanceSpec, pairs: Sequence[PreferencePair]) -> np.ndarray:
    n_prompts, n_responses = spec.n_prompts, spec.n_responses
    n_cells = n_prompts * n_responses
    if spec.feature_dim == n_cells:
        base = np.eye(n_cells).reshape(n_prompts, n_responses, n_cells)
    else:
        d = spec.feature_dim
        base = CounterRNG(spec.seed, "features").normal(n_cells * d).reshape(n_prompts, n_responses, d) / math.sqrt(d)
    # share a fraction c of the designated winner/loser feature mass; c = 1 makes them identical
    half = spec.feature_collision / 2.0
    feats = base.copy()
    for p in pairs:
        fw, fl = base[p.prompt, p.winner], base[p.prompt, p.loser]
        feats[p.prompt, p.winner] = (1.0 - half) * fw + half * fl
        feats[p.prompt, p.loser] = half * fw + (1.0 - half) * fl
    feats.setflags(write=False)
    return feats


def gen_instance(spec: InstanceSpec) -> Instance:
    rewards = spec.reward_scale * CounterRNG(spec.seed, "rewards").normal(spec.n_prompts * spec.n_responses)
    rewards = rewards.reshape(spec.n_prompts, spec.n_responses) + 0.0  # drop -0.0 from a zero scale
    pairs = _designated_pairs(rewards)
    features = _features(spec, pairs) if spec.feature_dim is not None else None
    return Instance(
        spec=spec,
        reward=RewardModel(rewards),
        reference=ReferencePolicy.uniform(spec.n_prompts, spec.n_responses),
        designated_pairs=pairs,
        features=features,
    )


@dataclass(frozen=True)
class PreferenceDataset:
    pairs: tuple[PreferencePair, ...]
    provenance: dict = field(default_factory=dict, compare=False)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def validate(self, shape: tuple[int, int]) -> None:
        n_prompts, n_responses = shape
        for i, p in enumerate(self.pairs):
            if not (p.prompt < n_prompts and p.winner < n_responses and p.loser < n_responses):
                raise ValueError(f"pair {i} {p} is outside the {shape} instance")

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for p in self.pairs:
                fh.write(json.dumps(p.to_dict()) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> PreferenceDataset:
        pairs = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                pairs.append(PreferencePair(int(rec["prompt"]), int(rec["winner"]), int(rec["loser"])))
        return cls(tuple(pairs), {"source": str(path)})


def sample_preferences(reward: RewardModel, n_pairs: int, seed: int) -> PreferenceDataset:
    """Draw prompt and two distinct responses uniformly; label with P(a wins) = sigmoid(r_a - r_b)."""
    n_prompts, n_responses = reward.shape
    if n_responses < 2:
        raise ValueError("need at least 2 responses per prompt")
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    u = CounterRNG(seed, "pairs").uniform(4 * n_pairs).reshape(n_pairs, 4)
    prompts = np.floor(u[:, 0] * n_prompts).astype(np.int64)
    a = np.floor(u[:, 1] * n_responses).astype(np.int64)
    b = np.floor(u[:, 2] * (n_responses - 1)).astype(np.int64)
    b += b >= a
    gap = reward.rewards[prompts, a] - reward.rewards[prompts, b]
    p_a = np.where(gap >= 0, 1.0 / (1.0 + np.exp(-np.abs(gap))), np.exp(-np.abs(gap)) / (1.0 + np.exp(-np.abs(gap))))
    a_wins = u[:, 3] < p_a
    winners = np.where(a_wins, a, b)
    losers = np.where(a_wins, b, a)
    pairs = tuple(PreferencePair(int(x), int(w), int(l)) for x, w, l in zip(prompts, winners, losers))
    return PreferenceDataset(pairs, {"n_pairs": n_pairs, "seed": seed, "generator_version": GENERATOR_VERSION})
