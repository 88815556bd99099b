"""Shared domain types and the policy/reference logits difference."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# exp(-745) is the smallest positive double (subnormal); anything lower underflows to 0.
DEFAULT_LOG_FLOOR = -745.0


class NumericDomainError(ArithmeticError):
    """A computation produced or would produce a non-finite value."""


class MissingEntryError(KeyError):
    """A (prompt, response) id is not covered by a table."""

    def __init__(self, prompt: int, response: int):
        self.prompt = prompt
        self.response = response
        super().__init__(f"no entry for (prompt={prompt}, response={response})")


@dataclass(frozen=True)
class PreferencePair:
    prompt: int
    winner: int
    loser: int

    def __post_init__(self):
        for name in ("prompt", "winner", "loser"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} id must be non-negative")
        if self.winner == self.loser:
            raise ValueError(f"winner and loser must differ, got {self.winner}")

    def swapped(self) -> PreferencePair:
        return PreferencePair(self.prompt, self.loser, self.winner)

    def to_dict(self) -> dict:
        return {"prompt": int(self.prompt), "winner": int(self.winner), "loser": int(self.loser)}


class LogProbTable:
    """Per-prompt normalized log-probabilities, shape (n_prompts, n_responses).

    Values below ``floor`` are clamped to it and reported through
    :attr:`saturated`. The underlying array is read-only.
    """

    __slots__ = ("_values", "floor")

    def __init__(self, values, floor: float = DEFAULT_LOG_FLOOR, check: bool = True, atol: float = 1e-12):
        arr = np.array(values, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[1] < 1:
            raise ValueError(f"expected a 2-d (prompts, responses) array, got shape {arr.shape}")
        if np.isnan(arr).any() or np.isposinf(arr).any():
            raise NumericDomainError("log-probabilities must not be NaN or +inf")
        arr = np.maximum(arr, floor)
        if check:
            totals = np.exp(arr).sum(axis=1)
            bad = np.flatnonzero(np.abs(totals - 1.0) > atol)
            if bad.size:
                p = int(bad[0])
                raise ValueError(f"prompt {p} is not normalized: sum of probabilities = {totals[p]!r}")
        arr.setflags(write=False)
        self._values = arr
        self.floor = float(floor)

    @classmethod
    def from_logits(cls, scores, floor: float = DEFAULT_LOG_FLOOR) -> LogProbTable:
        """Per-row log-softmax of unnormalized scores."""
        return cls(log_softmax(np.asarray(scores, dtype=np.float64)), floor=floor)

    @classmethod
    def uniform(cls, n_prompts: int, n_responses: int) -> LogProbTable:
        return cls(np.full((n_prompts, n_responses), -math.log(n_responses)))

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def shape(self) -> tuple[int, int]:
        return self._values.shape

    @property
    def n_prompts(self) -> int:
        return self._values.shape[0]

    @property
    def n_responses(self) -> int:
        return self._values.shape[1]

    @property
    def saturated(self) -> np.ndarray:
        return self._values <= self.floor

    def probs(self) -> np.ndarray:
        return np.exp(self._values)

    def covers(self, prompt: int, response: int) -> bool:
        return 0 <= prompt < self.n_prompts and 0 <= response < self.n_responses

    def logp(self, prompt: int, response: int) -> float:
        if not self.covers(prompt, response):
            raise MissingEntryError(prompt, response)
        return float(self._values[prompt, response])

    def is_saturated(self, prompt: int, response: int) -> bool:
        return self.logp(prompt, response) <= self.floor

    def __eq__(self, other):
        if not isinstance(other, LogProbTable):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._values, other._values))

    def __hash__(self):
        return hash(self._values.tobytes())

    def __repr__(self):
        return f"LogProbTable(shape={self.shape})"


def log_softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max subtraction."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def logits_diff(policy: LogProbTable, reference: LogProbTable, pair: PreferencePair) -> float:
    """Log-ratio of winner minus log-ratio of loser, policy against reference."""
    value = (policy.logp(pair.prompt, pair.winner) - reference.logp(pair.prompt, pair.winner)) - (
        policy.logp(pair.prompt, pair.loser) - reference.logp(pair.prompt, pair.loser)
    )
    if not math.isfinite(value):
        raise NumericDomainError(f"logits difference is not finite for {pair}")
    return value


def pair_probs(policy: LogProbTable, pair: PreferencePair) -> tuple[float, float]:
    """(pi_w, pi_l) for the pair.

    Entries at the table floor come back as exp(floor), which is positive
    for the default floor.
    """
    return (
        math.exp(policy.logp(pair.prompt, pair.winner)),
        math.exp(policy.logp(pair.prompt, pair.loser)),
    )
