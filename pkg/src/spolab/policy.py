"""Toy softmax policies with exact log-probability gradients.

Both policies score every (prompt, response) and normalize per prompt with
a softmax. The tabular policy owns one parameter per score; the
linear-feature policy shares a weight vector across all scores, which is
what lets a gradient on one response leak into another.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .core import DEFAULT_LOG_FLOOR, LogProbTable, PreferencePair, log_softmax


class ReferencePolicy(LogProbTable):
    """Frozen log-probability table the trained policy is compared against."""

    __slots__ = ()

    @classmethod
    def snapshot(cls, policy) -> ReferencePolicy:
        table = policy.log_probs() if hasattr(policy, "log_probs") else policy
        return cls(table.values, floor=table.floor)

    @classmethod
    def uniform(cls, n_prompts: int, n_responses: int) -> ReferencePolicy:
        return cls(np.full((n_prompts, n_responses), -np.log(n_responses)))


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


class _SoftmaxPolicy:
    floor = DEFAULT_LOG_FLOOR

    def scores(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def params(self) -> np.ndarray:
        raise NotImplementedError

    def with_params(self, params: np.ndarray):
        raise NotImplementedError

    @property
    def shape(self) -> tuple[int, int]:
        raise NotImplementedError

    @property
    def n_params(self) -> int:
        return self.params.size

    def raw_log_probs(self) -> np.ndarray:
        """Unclamped log-softmax of the scores."""
        return log_softmax(self.scores())

    def log_probs(self) -> LogProbTable:
        return LogProbTable(self.raw_log_probs(), floor=self.floor)

    def probs(self) -> np.ndarray:
        return np.exp(self.raw_log_probs())

    def _check_ids(self, prompt: int, response: int):
        n_prompts, n_responses = self.shape
        if not (0 <= prompt < n_prompts and 0 <= response < n_responses):
            raise IndexError(f"(prompt={prompt}, response={response}) outside {self.shape}")

    def dlogprob_dparams(self, prompt: int, response: int) -> np.ndarray:
        raise NotImplementedError

    def dlogits_dparams(self, pair: PreferencePair) -> np.ndarray:
        """Gradient of the pair's logits difference; the reference contributes nothing."""
        return self.dlogprob_dparams(pair.prompt, pair.winner) - self.dlogprob_dparams(pair.prompt, pair.loser)

    def apply_update(self, direction, step: float):
        direction = np.asarray(direction, dtype=np.float64)
        if direction.shape != (self.n_params,):
            raise ValueError(f"direction has shape {direction.shape}, expected ({self.n_params},)")
        return self.with_params(self.params - step * direction)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


class TabularPolicy(_SoftmaxPolicy):
    def __init__(self, theta):
        self.theta = _frozen(theta, 2, "theta")

    @classmethod
    def zeros(cls, n_prompts: int, n_responses: int) -> TabularPolicy:
        return cls(np.zeros((n_prompts, n_responses)))

    @classmethod
    def random(cls, n_prompts: int, n_responses: int, rng: np.random.Generator, scale: float = 1.0):
        return cls(scale * rng.standard_normal((n_prompts, n_responses)))

    @property
    def shape(self):
        return self.theta.shape

    @property
    def params(self) -> np.ndarray:
        return self.theta.ravel().copy()

    def with_params(self, params) -> TabularPolicy:
        return TabularPolicy(np.asarray(params, dtype=np.float64).reshape(self.shape))

    def scores(self) -> np.ndarray:
        return self.theta

    def dlogprob_dparams(self, prompt: int, response: int) -> np.ndarray:
        self._check_ids(prompt, response)
        grad = np.zeros(self.shape)
        grad[prompt] = -self.probs()[prompt]
        grad[prompt, response] += 1.0
        return grad.ravel()

    def dlogits_dparams(self, pair: PreferencePair) -> np.ndarray:
        # the softmax normalizer cancels between winner and loser
        self._check_ids(pair.prompt, pair.winner)
        self._check_ids(pair.prompt, pair.loser)
        grad = np.zeros(self.shape)
        grad[pair.prompt, pair.winner] = 1.0
        grad[pair.prompt, pair.loser] = -1.0
        return grad.ravel()

    def to_dict(self) -> dict:
        n_prompts, n_responses = self.shape
        return {
            "kind": "tabular",
            "prompts": n_prompts,
            "responses_per_prompt": n_responses,
            "params": self.theta.tolist(),
        }


class LinearFeaturePolicy(_SoftmaxPolicy):
    """Scores w . phi(x, y) with one weight vector shared by every prompt and response."""

    def __init__(self, features, weights):
        self.features = _frozen(features, 3, "features")
        self.weights = _frozen(weights, 1, "weights")
        if self.features.shape[2] != self.weights.shape[0]:
            raise ValueError(
                f"feature dimension {self.features.shape[2]} does not match weights {self.weights.shape[0]}"
            )

    @classmethod
    def zeros(cls, features) -> LinearFeaturePolicy:
        features = np.asarray(features, dtype=np.float64)
        return cls(features, np.zeros(features.shape[2]))

    @property
    def shape(self):
        return self.features.shape[:2]

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def params(self) -> np.ndarray:
        return self.weights.copy()

    def with_params(self, params) -> LinearFeaturePolicy:
        return LinearFeaturePolicy(self.features, params)

    def scores(self) -> np.ndarray:
        return self.features @ self.weights

    def dlogprob_dparams(self, prompt: int, response: int) -> np.ndarray:
        self._check_ids(prompt, response)
        phi = self.features[prompt]
        return phi[response] - self.probs()[prompt] @ phi

    def dlogits_dparams(self, pair: PreferencePair) -> np.ndarray:
        self._check_ids(pair.prompt, pair.winner)
        self._check_ids(pair.prompt, pair.loser)
        return self.features[pair.prompt, pair.winner] - self.features[pair.prompt, pair.loser]

    def to_dict(self) -> dict:
        n_prompts, n_responses = self.shape
        return {
            "kind": "linear",
            "prompts": n_prompts,
            "responses_per_prompt": n_responses,
            "features": self.features.tolist(),
            "weights": self.weights.tolist(),
        }


def policy_from_dict(doc: dict):
    kind = doc.get("kind")
    if kind == "tabular":
        policy = TabularPolicy(doc["params"])
    elif kind == "linear":
        policy = LinearFeaturePolicy(doc["features"], doc["weights"])
    else:
        raise ValueError(f"unknown policy kind {kind!r}")
    if policy.shape != (doc["prompts"], doc["responses_per_prompt"]):
        raise ValueError(f"declared shape {(doc['prompts'], doc['responses_per_prompt'])} != {policy.shape}")
    return policy


def load_policy(path):
    return policy_from_dict(json.loads(Path(path).read_text()))


def one_hot_features(n_prompts: int, n_responses: int) -> np.ndarray:
    """Identity embedding: a linear policy over these features is a tabular policy."""
    return np.eye(n_prompts * n_responses).reshape(n_prompts, n_responses, n_prompts * n_responses)
