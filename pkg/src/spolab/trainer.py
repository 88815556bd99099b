"""Deterministic full-batch (or seeded minibatch) training on preference pairs."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from .core import LogProbTable, NumericDomainError, PreferencePair, logits_diff, pair_probs
from .datagen import CounterRNG, PreferenceDataset
from .losses import LossKind, LossSpec, evaluate, log_grad_wrt_pi_l

RECORD_COLUMNS = (
    "step",
    "mean_loss",
    "pair_id",
    "logits",
    "beta_logits",
    "pi_w",
    "pi_l",
    "grad_pi_l",
    "grad_pi_w",
    "grad_norm_params",
    "saturated_flag",
)


class TrainingAborted(NumericDomainError):
    """Raised on a non-finite loss or gradient; carries the records logged so far."""

    def __init__(self, step: int, pair: PreferencePair | None, reason: str, records=()):
        self.step = step
        self.pair = pair
        self.reason = reason
        self.records = list(records)
        where = f" on pair {pair}" if pair is not None else ""
        super().__init__(f"training aborted at step {step}{where}: {reason}")


@dataclass(frozen=True)
class AdamParams:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec
    learning_rate: float = 0.1
    steps: int = 1000
    optimizer: str = "sgd"
    adam: AdamParams = field(default_factory=AdamParams)
    batch_size: int | None = None
    batch_seed: int = 0
    log_every: int = 1
    grad_clip: float | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.log_every < 1:
            raise ValueError("log_every must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, grad, lr: float, params: AdamParams = AdamParams()) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam step. The returned update is subtracted from the parameters."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.m.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match state {state.m.shape}")
    t = state.t + 1
    m = params.beta1 * state.m + (1.0 - params.beta1) * grad
    v = params.beta2 * state.v + (1.0 - params.beta2) * grad * grad
    m_hat = m / (1.0 - params.beta1**t)
    v_hat = v / (1.0 - params.beta2**t)
    return AdamState(m, v, t), lr * m_hat / (np.sqrt(v_hat) + params.eps)


@dataclass(frozen=True)
class RunRecord:
    step: int
    mean_loss: float
    pair_id: int
    logits: float
    beta_logits: float
    pi_w: float
    pi_l: float
    grad_pi_l: float
    grad_pi_w: float
    grad_norm_params: float
    saturated_flag: bool

    def row(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]


@dataclass(frozen=True)
class PairDiagnostics:
    logits: float
    beta_logits: float
    pi_w: float
    pi_l: float
    grad_pi_l: float
    grad_pi_w: float
    saturated: bool


def track_pair_diagnostics(
    policy: LogProbTable, reference: LogProbTable, loss: LossSpec, pair: PreferencePair
) -> PairDiagnostics:
    """Logits, probabilities and the closed-form d/d pi gradients for one pair."""
    logits = logits_diff(policy, reference, pair)
    pi_w, pi_l = pair_probs(policy, pair)
    lw, ll = policy.logp(pair.prompt, pair.winner), policy.logp(pair.prompt, pair.loser)
    rw, rl = reference.logp(pair.prompt, pair.winner), reference.logp(pair.prompt, pair.loser)
    g_l = log_grad_wrt_pi_l(loss, lw, ll, rw, rl, log_floor=policy.floor)
    grad_pi_l = g_l.value
    grad_pi_w = evaluate(loss, logits).d_dlogits / pi_w
    saturated = (
        g_l.saturated
        or lw <= policy.floor
        or not math.isfinite(grad_pi_l)
        or not math.isfinite(grad_pi_w)
    )
    return PairDiagnostics(logits, loss.beta * logits, pi_w, pi_l, grad_pi_l, grad_pi_w, saturated)


def _pair_index(pairs: Sequence[PreferencePair]):
    idx = np.array([(p.prompt, p.winner, p.loser) for p in pairs], dtype=np.int64).reshape(-1, 3)
    return idx[:, 0], idx[:, 1], idx[:, 2]


def _pair_logits(log_probs: np.ndarray, reference: LogProbTable, prompts, winners, losers) -> np.ndarray:
    ratio = log_probs - reference.values
    return ratio[prompts, winners] - ratio[prompts, losers]


def _logits_jacobian(policy, pairs: Sequence[PreferencePair]) -> np.ndarray:
    return np.stack([policy.dlogits_dparams(p) for p in pairs])


def _evaluate_pairs(policy, reference, pairs, index, loss: LossSpec, step: int):
    logits = _pair_logits(policy.raw_log_probs(), reference, *index)
    values = np.empty(len(pairs))
    derivs = np.empty(len(pairs))
    for i, (pair, z) in enumerate(zip(pairs, logits)):
        try:
            ev = evaluate(loss, float(z))
        except NumericDomainError as exc:
            raise TrainingAborted(step, pair, str(exc)) from exc
        if not (math.isfinite(ev.value) and math.isfinite(ev.d_dlogits)):
            raise TrainingAborted(step, pair, "non-finite loss or derivative")
        values[i], derivs[i] = ev.value, ev.d_dlogits
    return values, derivs


def batch_loss_and_grad(policy, reference: LogProbTable, pairs: Sequence[PreferencePair], loss: LossSpec, step: int = 0):
    """Mean loss over ``pairs`` and its gradient w.r.t. the flattened policy parameters."""
    values, derivs = _evaluate_pairs(policy, reference, pairs, _pair_index(pairs), loss, step)
    return float(values.mean()), derivs @ _logits_jacobian(policy, pairs) / len(pairs)


def train(
    policy,
    reference: LogProbTable,
    dataset: PreferenceDataset | Sequence[PreferencePair],
    config: TrainConfig,
    track: Sequence[PreferencePair] | None = None,
):
    """Run exactly ``config.steps`` updates and return (final policy, records).

    A record is logged for every tracked pair at step 0, every
    ``log_every`` steps, and after the final update. ``track`` defaults to
    the distinct dataset pairs (first 16).
    """
    pairs = tuple(dataset)
    if not pairs:
        raise ValueError("dataset is empty")
    if isinstance(dataset, PreferenceDataset):
        dataset.validate(policy.shape)
    if track is None:
        track = tuple(dict.fromkeys(pairs))[:16]
    full_index = _pair_index(pairs)
    loss = config.loss
    batch_rng = CounterRNG(config.batch_seed, "minibatch") if config.batch_size else None
    adam = AdamState.zeros(policy.n_params) if config.optimizer == "adam" else None
    records: list[RunRecord] = []

    for step in range(config.steps + 1):
        try:
            values, derivs = _evaluate_pairs(policy, reference, pairs, full_index, loss, step)
            if batch_rng is not None:
                chosen = batch_rng.integers(config.batch_size, len(pairs))
                grad = derivs[chosen] @ _logits_jacobian(policy, [pairs[i] for i in chosen]) / len(chosen)
            else:
                grad = derivs @ _logits_jacobian(policy, pairs) / len(pairs)
        except TrainingAborted as exc:
            exc.records = records
            raise
        norm = float(np.linalg.norm(grad))
        if not math.isfinite(norm):
            raise TrainingAborted(step, None, "non-finite parameter gradient", records)
        if config.grad_clip is not None and norm > config.grad_clip:
            grad = grad * (config.grad_clip / norm)
            norm = float(np.linalg.norm(grad))

        if step % config.log_every == 0 or step == config.steps:
            table = policy.log_probs()
            mean_loss = float(values.mean())
            for pair_id, pair in enumerate(track):
                d = track_pair_diagnostics(table, reference, loss, pair)
                records.append(
                    RunRecord(
                        step, mean_loss, pair_id, d.logits, d.beta_logits, d.pi_w, d.pi_l,
                        d.grad_pi_l, d.grad_pi_w, norm, d.saturated,
                    )
                )
        if step == config.steps:
            break

        if adam is not None:
            adam, update = adam_step(adam, grad, config.learning_rate, config.adam)
            policy = policy.with_params(policy.params - update)
        else:
            policy = policy.apply_update(grad, config.learning_rate)
    return policy, records


def config_to_dict(config: TrainConfig) -> dict:
    doc = asdict(config)
    doc["loss"]["kind"] = LossKind(config.loss.kind).value
    return doc
