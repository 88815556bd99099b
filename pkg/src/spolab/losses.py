"""DPO, SPO and squared-target preference losses as scalar functions of the logits difference.

Every loss exposes its derivative with respect to the *raw* logits
difference (not the scaled argument ``X = beta * logits``), so callers
can chain-rule into any parameterization without knowing ``beta``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

from .core import DEFAULT_LOG_FLOOR, NumericDomainError

# Below this X, exp(-X) overflows a double.
DEFAULT_X_FLOOR = -700.0


class LossOverflowError(NumericDomainError, OverflowError):
    pass


class LossKind(str, enum.Enum):
    DPO = "dpo"
    SPO = "spo"
    SQUARED_TARGET = "sq"

    @classmethod
    def parse(cls, text: str) -> LossKind:
        key = text.strip().lower()
        aliases = {"squared": "sq", "squaredtarget": "sq", "squared_target": "sq"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown loss {text!r}; expected one of dpo, spo, sq") from None


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind
    beta: float = 0.1
    target_reward_gap: float | None = None
    x_floor: float = DEFAULT_X_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be positive and finite, got {self.beta}")
        if self.kind is LossKind.SQUARED_TARGET:
            if self.target_reward_gap is None or not math.isfinite(self.target_reward_gap):
                raise ValueError("squared-target loss needs a finite target_reward_gap")

    @property
    def target_logits(self) -> float | None:
        """The logits value at which the loss is stationary, if finite."""
        if self.kind is LossKind.SPO:
            return 1.0 / self.beta
        if self.kind is LossKind.SQUARED_TARGET:
            return self.target_reward_gap / self.beta
        return None


@dataclass(frozen=True)
class LossEval:
    value: float
    d_dlogits: float


def _check_finite(logits: float) -> float:
    logits = float(logits)
    if not math.isfinite(logits):
        raise NumericDomainError(f"logits must be finite, got {logits}")
    return logits


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def neg_log_sigmoid(x: float) -> float:
    """-log(sigmoid(x)) = log(1 + exp(-x)), without overflow."""
    if x >= 0:
        return math.log1p(math.exp(-x))
    return -x + math.log1p(math.exp(x))


def eval_dpo(spec: LossSpec, logits: float) -> LossEval:
    logits = _check_finite(logits)
    x = spec.beta * logits
    return LossEval(neg_log_sigmoid(x), -spec.beta * sigmoid(-x))


def eval_spo(spec: LossSpec, logits: float) -> LossEval:
    logits = _check_finite(logits)
    x = spec.beta * logits
    if x < spec.x_floor:
        raise LossOverflowError(f"SPO argument X={x:.6g} is below the floor {spec.x_floor}; exp(-X) overflows")
    e = math.exp(-x)
    return LossEval(-x * e, spec.beta * (x - 1.0) * e)


def eval_squared_target(spec: LossSpec, logits: float) -> LossEval:
    logits = _check_finite(logits)
    resid = logits - spec.target_reward_gap / spec.beta
    return LossEval(resid * resid, 2.0 * resid)


_EVALUATORS = {
    LossKind.DPO: eval_dpo,
    LossKind.SPO: eval_spo,
    LossKind.SQUARED_TARGET: eval_squared_target,
}


def evaluate(spec: LossSpec, logits: float) -> LossEval:
    return _EVALUATORS[spec.kind](spec, logits)


def loss_value(spec: LossSpec, logits: float) -> float:
    return evaluate(spec, logits).value


def _pair_logits(pi_w, pi_l, ref_w, ref_l) -> float:
    for name, p in (("pi_w", pi_w), ("pi_l", pi_l), ("ref_w", ref_w), ("ref_l", ref_l)):
        if not 0.0 < p <= 1.0:
            raise ValueError(f"{name} must lie in (0, 1], got {p}")
    return (math.log(pi_w) - math.log(ref_w)) - (math.log(pi_l) - math.log(ref_l))


def grad_wrt_pi_l(spec: LossSpec, pi_w: float, pi_l: float, ref_w: float, ref_l: float) -> float:
    """Partial derivative of the pair loss w.r.t. the loser probability.

    Holds pi_w and both reference probabilities fixed, so
    d logits / d pi_l = -1 / pi_l.
    """
    d = evaluate(spec, _pair_logits(pi_w, pi_l, ref_w, ref_l)).d_dlogits
    return -d / pi_l


def grad_wrt_pi_w(spec: LossSpec, pi_w: float, pi_l: float, ref_w: float, ref_l: float) -> float:
    d = evaluate(spec, _pair_logits(pi_w, pi_l, ref_w, ref_l)).d_dlogits
    return d / pi_w


@dataclass(frozen=True)
class LogGradient:
    """A gradient held as sign * exp(log_abs), for magnitudes beyond double range."""

    sign: float
    log_abs: float
    saturated: bool

    @property
    def value(self) -> float:
        if self.sign == 0.0:
            return 0.0
        try:
            return self.sign * math.exp(self.log_abs)
        except OverflowError:
            return self.sign * math.inf


def _log_abs_d_dlogits(spec: LossSpec, logits: float) -> tuple[float, float]:
    x = spec.beta * logits
    if spec.kind is LossKind.DPO:
        # log(beta * sigmoid(-x)) = log(beta) - softplus(x)
        return -1.0, math.log(spec.beta) - neg_log_sigmoid(-x)
    if spec.kind is LossKind.SPO:
        if x < spec.x_floor:
            raise LossOverflowError(f"SPO argument X={x:.6g} is below the floor {spec.x_floor}")
        if x == 1.0:
            return 0.0, -math.inf
        return math.copysign(1.0, x - 1.0), math.log(spec.beta) + math.log(abs(x - 1.0)) - x
    d = evaluate(spec, logits).d_dlogits
    if d == 0.0:
        return 0.0, -math.inf
    return math.copysign(1.0, d), math.log(abs(d))


def log_grad_wrt_pi_l(
    spec: LossSpec,
    log_pi_w: float,
    log_pi_l: float,
    log_ref_w: float,
    log_ref_l: float,
    log_floor: float = DEFAULT_LOG_FLOOR,
) -> LogGradient:
    """Log-magnitude form of :func:`grad_wrt_pi_l`, usable as pi_l approaches underflow."""
    saturated = log_pi_l <= log_floor
    log_pi_l = max(log_pi_l, log_floor)
    logits = (log_pi_w - log_ref_w) - (log_pi_l - log_ref_l)
    sign, log_abs = _log_abs_d_dlogits(spec, logits)
    return LogGradient(-sign, log_abs - log_pi_l, saturated)
