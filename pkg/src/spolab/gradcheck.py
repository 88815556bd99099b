"""Finite-difference checks for the closed-form derivatives used elsewhere."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import mpmath
import numpy as np

from .core import NumericDomainError
from .losses import LossKind, LossSpec, evaluate, grad_wrt_pi_l, grad_wrt_pi_w, loss_value

EPS = 1e-12
# Central differences carry ~1e-11 of rounding/truncation noise around O(1) values,
# so a derivative that is zero analytically is accepted when both sides are below this.
ZERO_TOL = 1e-8


@dataclass(frozen=True)
class GradReport:
    point: dict = field(hash=False)
    analytic: float
    numeric: float
    abs_err: float
    rel_err: float
    passed: bool

    @classmethod
    def compare(cls, point: dict, analytic: float, numeric: float, tol: float, zero_tol: float = ZERO_TOL):
        abs_err = abs(analytic - numeric)
        rel_err = abs_err / max(abs(analytic), abs(numeric), EPS)
        near_zero = max(abs(analytic), abs(numeric)) < zero_tol
        return cls(point, analytic, numeric, abs_err, rel_err, bool(rel_err <= tol or near_zero))


def central_diff(f: Callable[[float], float], x: float, h: float) -> float:
    if not h > 0:
        raise ValueError("step h must be positive")
    fp, fm = f(x + h), f(x - h)
    if not (math.isfinite(fp) and math.isfinite(fm)):
        raise NumericDomainError(f"f is not finite at x={x}±{h}")
    return (fp - fm) / (2.0 * h)


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[j] += h
        xm.flat[j] -= h
        grad.flat[j] = (f(xp) - f(xm)) / (2.0 * h)
    return grad


def check_loss_grads(
    spec: LossSpec, grid: Sequence[float], tol: float = 1e-5, h: float = 1e-6, zero_tol: float = ZERO_TOL
) -> list[GradReport]:
    """Compare d_dlogits against central differences at each grid point."""
    if not len(grid):
        raise ValueError("grid must not be empty")
    if tol <= 0:
        raise ValueError("tol must be positive")
    reports = []
    for logits in grid:
        logits = float(logits)
        analytic = evaluate(spec, logits).d_dlogits
        numeric = central_diff(lambda z: loss_value(spec, z), logits, h)
        reports.append(
            GradReport.compare(
                {"loss": spec.kind.value, "beta": spec.beta, "logits": logits}, analytic, numeric, tol, zero_tol
            )
        )
    return reports


def mp_loss_value(spec: LossSpec, logits):
    """The three losses written directly in mpmath, sharing no code with the float path."""
    x = spec.beta * logits
    if spec.kind is LossKind.DPO:
        return mpmath.log1p(mpmath.exp(-x))
    if spec.kind is LossKind.SPO:
        return -x * mpmath.exp(-x)
    return (logits - mpmath.mpf(spec.target_reward_gap) / spec.beta) ** 2


def check_prob_grads(
    spec: LossSpec,
    pi_w: float,
    pi_l: float,
    ref_w: float,
    ref_l: float,
    tol: float = 1e-5,
    rel_step: float = 1e-8,
    zero_tol: float = ZERO_TOL,
    dps: int | None = 40,
) -> tuple[GradReport, GradReport]:
    """Check the closed-form d/d pi_l and d/d pi_w with steps proportional to each probability.

    With ``dps`` set, the finite difference is evaluated in ``dps``-digit
    arithmetic so that float rounding does not swamp derivatives near a
    stationary point; ``dps=None`` uses plain floats.
    """
    point = {"loss": spec.kind.value, "beta": spec.beta, "pi_w": pi_w, "pi_l": pi_l, "ref_w": ref_w, "ref_l": ref_l}

    if dps is None:
        def loss_at(pw, pl):
            logits = (math.log(pw) - math.log(ref_w)) - (math.log(pl) - math.log(ref_l))
            return loss_value(spec, logits)

        num_l = central_diff(lambda p: loss_at(pi_w, p), pi_l, rel_step * pi_l)
        num_w = central_diff(lambda p: loss_at(p, pi_l), pi_w, rel_step * pi_w)
    else:
        with mpmath.workdps(dps):
            mw, ml, rw, rl = (mpmath.mpf(v) for v in (pi_w, pi_l, ref_w, ref_l))

            def loss_at(pw, pl):
                return mp_loss_value(spec, mpmath.log(pw / rw) - mpmath.log(pl / rl))

            hl, hw = rel_step * ml, rel_step * mw
            num_l = float((loss_at(mw, ml + hl) - loss_at(mw, ml - hl)) / (2 * hl))
            num_w = float((loss_at(mw + hw, ml) - loss_at(mw - hw, ml)) / (2 * hw))
    return (
        GradReport.compare({**point, "wrt": "pi_l"}, grad_wrt_pi_l(spec, pi_w, pi_l, ref_w, ref_l), num_l, tol, zero_tol),
        GradReport.compare({**point, "wrt": "pi_w"}, grad_wrt_pi_w(spec, pi_w, pi_l, ref_w, ref_l), num_w, tol, zero_tol),
    )


def convergence_ratio(f: Callable[[float], float], df: Callable[[float], float], x: float, h: float) -> float:
    """error(h) / error(h/2) for the central difference; ~4 for a second-order scheme."""
    exact = df(x)
    return abs(central_diff(f, x, h) - exact) / abs(central_diff(f, x, h / 2) - exact)
