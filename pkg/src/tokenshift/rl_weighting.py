"""Objective terms for divergence-weighted RLVR advantages.

Group-normalized advantages, the DAPO clipped token surrogate, the k3 KL
estimator and the sigmoid divergence weight.  Nothing here trains; the
functions only produce values to check or feed elsewhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import GroupDegenerate, LengthMismatch, NonPositiveRatio, ScheduleInvalid


@dataclass(frozen=True)
class WeightingParams:
    s: float = 0.3
    alpha: float = 1.0


@dataclass(frozen=True)
class ClipParams:
    eps_low: float = 0.2
    eps_high: float = 0.28

    def __post_init__(self):
        if not (self.eps_low > 0 and self.eps_high > 0):
            raise ValueError("clip epsilons must be positive")


@dataclass(frozen=True)
class AlphaSchedule:
    start_step: int
    end_step: int
    end_value: float

    def __post_init__(self):
        if self.end_step <= self.start_step:
            raise ScheduleInvalid(
                f"end_step ({self.end_step}) must be after start_step ({self.start_step})"
            )


def group_advantage(rewards: Sequence[float]) -> list[float]:
    """(R_i - mean) / std with the population standard deviation."""
    if len(rewards) < 2:
        raise GroupDegenerate("a group needs at least two rewards")
    n = len(rewards)
    mean = math.fsum(rewards) / n
    std = math.sqrt(math.fsum((r - mean) ** 2 for r in rewards) / n)
    if std <= 1e-12:
        raise GroupDegenerate("all rewards in the group are equal")
    return [(r - mean) / std for r in rewards]


def dynamic_sampling_admissible(correct_count: int, G: int) -> bool:
    if not 0 <= correct_count <= G:
        raise ValueError(f"correct_count must lie in [0, {G}]")
    return 0 < correct_count < G


def k3_kl_estimate(ratio: float) -> float:
    if not ratio > 0:
        raise NonPositiveRatio(f"ratio must be positive, got {ratio}")
    d = ratio - 1.0  # exact near 1; log1p keeps the cancellation benign
    return max(d - math.log1p(d), 0.0)


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def sigmoid_weight(kl: float, params: WeightingParams) -> float:
    """w = 1 + s * (sigmoid(alpha * kl) - 1/2)."""
    if kl < 0:
        raise ValueError(f"kl must be non-negative, got {kl}")
    return 1.0 + params.s * (_sigmoid(params.alpha * kl) - 0.5)


def divergence_weighted_advantage(
    adv: Sequence[float], kls: Sequence[float], params: WeightingParams
) -> list[float]:
    if len(adv) != len(kls):
        raise LengthMismatch(f"{len(adv)} advantages vs {len(kls)} divergences")
    return [sigmoid_weight(k, params) * a for a, k in zip(adv, kls)]


def dapo_token_objective(ratio: float, advantage: float, clip: ClipParams) -> float:
    """min(r A, clip(r, 1 - eps_low, 1 + eps_high) A)."""
    if not ratio > 0:
        raise NonPositiveRatio(f"ratio must be positive, got {ratio}")
    clipped = min(max(ratio, 1.0 - clip.eps_low), 1.0 + clip.eps_high)
    return min(ratio * advantage, clipped * advantage)


def dapo_group_objective(
    ratios: Sequence[Sequence[float]], advantages: Sequence[Sequence[float]], clip: ClipParams
) -> float:
    """Token-level average: the per-token surrogates summed, over sum_i |o_i|."""
    if len(ratios) != len(advantages):
        raise LengthMismatch("ratios and advantages cover different numbers of responses")
    terms = []
    for rs, As in zip(ratios, advantages):
        if len(rs) != len(As):
            raise LengthMismatch("a response has mismatched ratio/advantage lengths")
        terms.extend(dapo_token_objective(r, a, clip) for r, a in zip(rs, As))
    if not terms:
        raise ValueError("no tokens")
    return math.fsum(terms) / len(terms)


def alpha_schedule(step: int, schedule: AlphaSchedule) -> float:
    """0 before start_step, linear to end_value at end_step, constant after."""
    if step <= schedule.start_step:
        return 0.0
    if step >= schedule.end_step:
        return schedule.end_value
    frac = (step - schedule.start_step) / (schedule.end_step - schedule.start_step)
    return schedule.end_value * frac


@dataclass(frozen=True)
class WeightedRow:
    ratio: float
    advantage: float
    kl: float
    kl_source: str
    weight: float
    weighted_advantage: float
    k3: float
    surrogate: float


def evaluate_rows(
    rows: Sequence[dict], params: WeightingParams, clip: ClipParams, kl_source: str = "caller"
) -> list[WeightedRow]:
    """Batch evaluation of ``{ratio, advantage, kl}`` rows.

    A row without ``kl`` falls back to k3 of its ratio and is tagged
    ``k3-sampled``.
    """
    out = []
    for i, row in enumerate(rows):
        try:
            r = float(row["ratio"])
            a = float(row["advantage"])
        except (KeyError, TypeError, ValueError):
            raise ValueError(f"row {i}: needs numeric 'ratio' and 'advantage'") from None
        k3 = k3_kl_estimate(r)
        if row.get("kl") is None:
            kl, src = k3, "k3-sampled"
        else:
            kl, src = float(row["kl"]), kl_source
        w = sigmoid_weight(kl, params)
        out.append(WeightedRow(r, a, kl, src, w, w * a, k3, dapo_token_objective(r, w * a, clip)))
    return out
