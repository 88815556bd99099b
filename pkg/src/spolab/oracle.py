"""Closed-form ground truth for KL-regularized reward maximization on finite response sets."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import LogProbTable, NumericDomainError, PreferencePair, logits_diff

# exp(r / beta) overflows a double just above 709.
MAX_SCALED_REWARD = 700.0


class OracleOverflowError(NumericDomainError, OverflowError):
    pass


class RewardModel:
    """Ground-truth reward r(x, y) as a dense (n_prompts, n_responses) array."""

    def __init__(self, rewards):
        arr = np.array(rewards, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"rewards must be 2-d, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("rewards must be finite")
        arr.setflags(write=False)
        self.rewards = arr

    @property
    def shape(self) -> tuple[int, int]:
        return self.rewards.shape

    def __call__(self, prompt: int, response: int) -> float:
        return float(self.rewards[prompt, response])

    def gap(self, pair: PreferencePair) -> float:
        return self(pair.prompt, pair.winner) - self(pair.prompt, pair.loser)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["prompt_id", "response_id", "reward"])
            for (x, y), r in np.ndenumerate(self.rewards):
                writer.writerow([x, y, repr(float(r))])

    @classmethod
    def from_csv(cls, path) -> RewardModel:
        rows = list(csv.DictReader(Path(path).read_text().splitlines()))
        n_prompts = 1 + max(int(r["prompt_id"]) for r in rows)
        n_responses = 1 + max(int(r["response_id"]) for r in rows)
        arr = np.full((n_prompts, n_responses), np.nan)
        for r in rows:
            arr[int(r["prompt_id"]), int(r["response_id"])] = float(r["reward"])
        if np.isnan(arr).any():
            raise ValueError(f"{path}: reward table does not cover every (prompt, response)")
        return cls(arr)


def _check_aligned(*tables):
    shapes = {t.shape for t in tables}
    if len(shapes) != 1:
        raise ValueError(f"tables are not aligned: shapes {sorted(shapes)}")


def _logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]


def _scaled_rewards(reward: RewardModel, beta: float) -> np.ndarray:
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    scaled = reward.rewards / beta
    worst = float(np.abs(scaled).max())
    if worst > MAX_SCALED_REWARD:
        raise OracleOverflowError(
            f"max |r/beta| = {worst:.4g} exceeds {MAX_SCALED_REWARD}; exp(r/beta) overflows, use a larger beta"
        )
    return scaled


def log_partition(reward: RewardModel, reference: LogProbTable, beta: float) -> np.ndarray:
    """ln Z(x) = ln sum_y pi_ref(y|x) exp(r(x,y)/beta), one value per prompt."""
    _check_aligned(reward, reference)
    return _logsumexp(reference.values + _scaled_rewards(reward, beta))


def optimal_policy(reward: RewardModel, reference: LogProbTable, beta: float) -> LogProbTable:
    """pi*(y|x) = pi_ref(y|x) exp(r(x,y)/beta) / Z(x)."""
    _check_aligned(reward, reference)
    logits = reference.values + _scaled_rewards(reward, beta)
    return LogProbTable(logits - _logsumexp(logits)[:, None], floor=reference.floor)


def rlhf_objective(policy: LogProbTable, reward: RewardModel, reference: LogProbTable, beta: float) -> float:
    """E_y~pi[r] - beta * KL(pi || pi_ref), averaged uniformly over prompts."""
    _check_aligned(policy, reward, reference)
    p = policy.probs()
    per_prompt = (p * (reward.rewards - beta * (policy.values - reference.values))).sum(axis=1)
    return float(per_prompt.mean())


def kl_divergence(p: LogProbTable, q: LogProbTable) -> tuple[np.ndarray, float]:
    """Per-prompt KL(p || q) and its mean.

    A q entry sitting at its floor while p is not yields +inf for that prompt,
    since the true q value is unknown below the floor.
    """
    _check_aligned(p, q)
    probs = p.probs()
    terms = probs * (p.values - q.values)
    blown = q.saturated & ~p.saturated
    per_prompt = terms.sum(axis=1)
    per_prompt[blown.any(axis=1)] = math.inf
    # guard against -1e-17 style rounding below zero
    per_prompt = np.where(np.isinf(per_prompt), per_prompt, np.maximum(per_prompt, 0.0))
    return per_prompt, float(per_prompt.mean())


def optimality_residuals(
    policy: LogProbTable,
    reference: LogProbTable,
    reward: RewardModel,
    beta: float,
    pairs: Sequence[PreferencePair],
) -> np.ndarray:
    """logits(pi) - (r_w - r_l) / beta for each pair."""
    _check_aligned(policy, reference, reward)
    return np.array([logits_diff(policy, reference, pair) - reward.gap(pair) / beta for pair in pairs])


def reward_identity_residual(
    optimal: LogProbTable, reference: LogProbTable, reward: RewardModel, beta: float
) -> float:
    """Largest deviation of beta*log(pi*/pi_ref) - r from the per-prompt constant -beta*ln Z(x)."""
    implied = beta * (optimal.values - reference.values) - reward.rewards
    target = -beta * log_partition(reward, reference, beta)
    return float(np.abs(implied - target[:, None]).max())


def closed_form_objective(reward: RewardModel, reference: LogProbTable, beta: float) -> float:
    """Value of the objective at the optimum: beta * mean_x ln Z(x)."""
    return float(beta * log_partition(reward, reference, beta).mean())


def perturbed_policies(optimal: LogProbTable, n: int, rng: np.random.Generator, scale: float = 0.5):
    """Random policies near and far from ``optimal``: Gaussian noise added to its log-probs."""
    base = optimal.values
    for _ in range(n):
        noise = rng.standard_normal(base.shape) * scale * rng.uniform(0.01, 1.0)
        yield LogProbTable.from_logits(base + noise, floor=optimal.floor)


@dataclass(frozen=True)
class DominanceResult:
    n_policies: int
    n_dominated: int
    worst_gap: float

    @property
    def holds(self) -> bool:
        return self.n_dominated == self.n_policies


def objective_dominance(
    reward: RewardModel,
    reference: LogProbTable,
    beta: float,
    n: int,
    rng: np.random.Generator,
    min_distance: float = 1e-6,
) -> DominanceResult:
    """Count random policies that score strictly below the optimum.

    Policies within ``min_distance`` of pi* in every probability are only
    required to not exceed it.
    """
    optimal = optimal_policy(reward, reference, beta)
    best = rlhf_objective(optimal, reward, reference, beta)
    dominated = 0
    worst_gap = math.inf
    for candidate in perturbed_policies(optimal, n, rng):
        gap = best - rlhf_objective(candidate, reward, reference, beta)
        worst_gap = min(worst_gap, gap)
        distinct = np.abs(candidate.probs() - optimal.probs()).max() > min_distance
        if gap > 0 or (not distinct and gap >= 0):
            dominated += 1
    return DominanceResult(n, dominated, worst_gap)
