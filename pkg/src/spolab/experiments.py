"""Experiment drivers behind the CLI subcommands. Each returns plain rows plus a summary."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import PreferencePair
from .datagen import InstanceSpec, gen_instance, sample_preferences
from .gradcheck import GradReport, check_loss_grads, check_prob_grads
from .losses import LossKind, LossOverflowError, LossSpec, evaluate, log_grad_wrt_pi_l
from .oracle import (
    OracleOverflowError,
    closed_form_objective,
    objective_dominance,
    optimal_policy,
    optimality_residuals,
    reward_identity_residual,
    rlhf_objective,
)
from .policy import LinearFeaturePolicy, ReferencePolicy
from .trainer import TrainConfig, TrainingAborted, train

LOSSCURVE_COLUMNS = ("loss_kind", "beta", "logits", "value", "d_dlogits", "flag")
GRADSWEEP_COLUMNS = ("loss_kind", "beta", "pi_l", "logits", "abs_grad_pi_l", "log_abs_grad_pi_l", "saturated")
FIT_COLUMNS = (
    "loss_kind", "beta", "slope", "intercept", "expected_slope", "log_factor_drift", "fit_lo", "fit_hi", "n_points",
)
GRADCHECK_COLUMNS = ("input", "analytic", "numeric", "abs_err", "rel_err", "pass")
HACKPROBE_COLUMNS = (
    "loss_kind", "feature_collision", "step", "pair_id", "pi_w", "pi_l", "pi_w_plus_pi_l", "logits",
    "log_ratio_w_l", "status",
)


def make_spec(kind: LossKind | str, beta: float, target_gap: float = 1.0) -> LossSpec:
    kind = LossKind(kind)
    return LossSpec(kind, beta, target_gap if kind is LossKind.SQUARED_TARGET else None)


def losscurve(kinds: Iterable[LossKind], betas: Iterable[float], grid: Sequence[float], target_gap: float = 1.0):
    rows = []
    for kind in kinds:
        for beta in betas:
            spec = make_spec(kind, beta, target_gap)
            for z in grid:
                try:
                    ev = evaluate(spec, float(z))
                    rows.append((spec.kind.value, beta, float(z), ev.value, ev.d_dlogits, ""))
                except LossOverflowError:
                    rows.append((spec.kind.value, beta, float(z), math.nan, math.nan, "overflow"))
    return rows


def default_pi_l_grid(lo: float = 1e-8, hi: float = 0.5, n: int = 60) -> np.ndarray:
    return np.logspace(math.log10(lo), math.log10(hi), n)


@dataclass(frozen=True)
class SlopeFit:
    loss_kind: str
    beta: float
    slope: float
    intercept: float
    fit_lo: float
    fit_hi: float
    n_points: int

    @property
    def expected_slope(self) -> float:
        """Pure power-law exponent beta - 1 of the closed forms as pi_l -> 0."""
        return self.beta - 1.0

    @property
    def log_factor_drift(self) -> float:
        """How much steeper than beta - 1 the fit is; positive when a log(1/pi_l) factor grows."""
        return self.expected_slope - self.slope

    def row(self):
        return (self.loss_kind, self.beta, self.slope, self.intercept, self.expected_slope,
                self.log_factor_drift, self.fit_lo, self.fit_hi, self.n_points)


def gradsweep(
    kinds: Iterable[LossKind],
    betas: Iterable[float],
    pi_l_grid: Sequence[float],
    pi_w: float = 0.5,
    ref_w: float = 0.5,
    ref_l: float = 0.5,
    fit_range: tuple[float, float] = (1e-8, 1e-6),
    target_gap: float = 1.0,
):
    """|d loss / d pi_l| along a pi_l grid with pi_w and the reference held fixed.

    Returns (rows, fits); each fit is a least-squares line of log|grad|
    against log pi_l over the non-saturated grid points inside ``fit_range``.
    """
    rows, fits = [], []
    lo, hi = fit_range
    for kind in kinds:
        for beta in betas:
            spec = make_spec(kind, beta, target_gap)
            xs, ys = [], []
            for p in pi_l_grid:
                p = float(p)
                g = log_grad_wrt_pi_l(spec, math.log(pi_w), math.log(p), math.log(ref_w), math.log(ref_l))
                logits = (math.log(pi_w) - math.log(ref_w)) - (math.log(p) - math.log(ref_l))
                rows.append((spec.kind.value, beta, p, logits, abs(g.value), g.log_abs, g.saturated))
                if lo * (1 - 1e-12) <= p <= hi * (1 + 1e-12) and not g.saturated and math.isfinite(g.log_abs):
                    xs.append(math.log(p))
                    ys.append(g.log_abs)
            if len(xs) >= 2:
                slope, intercept = np.polyfit(xs, ys, 1)
                fits.append(SlopeFit(spec.kind.value, beta, float(slope), float(intercept), lo, hi, len(xs)))
    return rows, fits


def gradcheck(
    kinds: Iterable[LossKind],
    betas: Iterable[float],
    grid: Sequence[float],
    n_random: int,
    seed: int,
    tol: float = 1e-5,
    target_gap: float = 1.0,
) -> list[GradReport]:
    """Logits-grid checks plus probability-space checks at random points."""
    reports = []
    rng = np.random.default_rng(seed)
    for kind in kinds:
        for beta in betas:
            spec = make_spec(kind, beta, target_gap)
            reports.extend(check_loss_grads(spec, grid, tol))
            for _ in range(n_random):
                pi_w, pi_l, ref_w, ref_l = random_prob_point(rng)
                reports.extend(check_prob_grads(spec, pi_w, pi_l, ref_w, ref_l, tol))
    return reports


def random_prob_point(rng: np.random.Generator) -> tuple[float, float, float, float]:
    """(pi_w, pi_l, ref_w, ref_l) with pi_l log-uniform over ten decades."""
    pi_w = float(rng.uniform(0.05, 1.0))
    pi_l = float(10.0 ** rng.uniform(-10, 0))
    ref_w, ref_l = (float(v) for v in rng.uniform(0.05, 1.0, 2))
    return pi_w, pi_l, ref_w, ref_l


def report_row(r: GradReport):
    desc = " ".join(f"{k}={v}" for k, v in r.point.items())
    return (desc, r.analytic, r.numeric, r.abs_err, r.rel_err, r.passed)


@dataclass
class OracleReport:
    instances: int
    beta: float
    max_identity_residual: float | None
    max_optimality_residual: float | None
    max_objective_identity_error: float | None
    dominance_holds: bool
    min_dominance_gap: float | None
    overflow: str | None = None

    def passed(self, tol: float = 1e-10) -> bool:
        return (
            self.overflow is None
            and self.max_identity_residual < tol
            and self.max_optimality_residual < tol
            and self.max_objective_identity_error < tol
            and self.dominance_holds
        )


def oracle_check(specs: Sequence[InstanceSpec], beta: float, n_random: int, seed: int) -> OracleReport:
    ident = optim = objective = 0.0
    holds = True
    min_gap = math.inf
    rng = np.random.default_rng(seed)
    for spec in specs:
        inst = gen_instance(spec)
        try:
            opt = optimal_policy(inst.reward, inst.reference, beta)
            ident = max(ident, reward_identity_residual(opt, inst.reference, inst.reward, beta))
            all_pairs = list(_all_pairs(*inst.reward.shape))
            res = optimality_residuals(opt, inst.reference, inst.reward, beta, all_pairs)
            optim = max(optim, float(np.abs(res).max()))
            objective = max(
                objective,
                abs(rlhf_objective(opt, inst.reward, inst.reference, beta)
                    - closed_form_objective(inst.reward, inst.reference, beta)),
            )
            dom = objective_dominance(inst.reward, inst.reference, beta, n_random, rng)
        except OracleOverflowError as exc:
            return OracleReport(len(specs), beta, None, None, None, False, None, str(exc))
        holds = holds and dom.holds
        min_gap = min(min_gap, dom.worst_gap)
    return OracleReport(len(specs), beta, ident, optim, objective, holds, min_gap)


def _all_pairs(n_prompts: int, n_responses: int):
    for x in range(n_prompts):
        for w in range(n_responses):
            for l in range(n_responses):
                if w != l:
                    yield PreferencePair(x, w, l)


def hackprobe(
    collisions: Sequence[float],
    kinds: Sequence[LossKind],
    instance: InstanceSpec,
    n_pairs: int,
    pair_seed: int,
    config_for: Callable[[LossKind], TrainConfig],
):
    """Train a shared-feature linear policy under each loss and collision level.

    ``config_for(kind)`` returns the TrainConfig for that loss. Rows track
    the designated (highest vs lowest reward) pair of every prompt.
    Returns (rows, aborted) where ``aborted`` lists (kind, collision, message).
    """
    rows, aborted = [], []
    for c in collisions:
        inst = gen_instance(InstanceSpec(**{**instance.to_dict(), "feature_collision": c}))
        dataset = sample_preferences(inst.reward, n_pairs, pair_seed)
        start = LinearFeaturePolicy.zeros(inst.features)
        reference = ReferencePolicy.snapshot(start)
        for kind in kinds:
            config = config_for(kind)
            abort = None
            try:
                _, records = train(start, reference, dataset, config, track=inst.designated_pairs)
            except TrainingAborted as exc:
                records, abort = exc.records, exc
                aborted.append((LossKind(kind).value, c, str(exc)))
            rows.extend(_probe_row(kind, c, r) for r in records)
            if abort is not None:
                rows.append((LossKind(kind).value, c, abort.step, -1, "", "", "", "", "", f"aborted: {abort.reason}"))
    return rows, aborted


def _probe_row(kind, c, r):
    return (
        LossKind(kind).value, c, r.step, r.pair_id, r.pi_w, r.pi_l, r.pi_w + r.pi_l, r.logits,
        math.log(r.pi_w) - math.log(r.pi_l), "ok",
    )
