"""Budgeted forward/reverse cross-sampling under a divergence switching rule.

Sampling is inverse-CDF over the rank order of the chosen (truncated)
distribution, one uniform per step from a seeded ``random.Random``.  At a
switch step the same uniform is also pushed through the primary
distribution; that coupled token decides whether the swap is an identity
swap.
"""

from __future__ import annotations

import random
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dist import NO_TRUNCATION, Distribution, TruncationSpec, truncate_top_p
from .policies import GenerationLimits, MixedPolicy, PolicyProvider, Step, SwitchingRule

__all__ = [
    "SwitchingRule",
    "CrossSampleConfig",
    "Intervention",
    "CrossSampleTrace",
    "mixed_next_distribution",
    "cross_sample_generate",
    "sample_sequence",
    "budget_sweep",
    "replacement_pair_histogram",
    "parse_predicate",
    "derive_seed",
    "run_many",
]


@dataclass(frozen=True)
class CrossSampleConfig:
    primary: PolicyProvider
    intervention: PolicyProvider
    rule: SwitchingRule
    limits: GenerationLimits
    budget: int | None = None  # None: unlimited
    seed: int = 0
    prompt: tuple[int, ...] = ()
    _mixed: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.budget is not None and self.budget < 0:
            raise ValueError(f"budget must be >= 0, got {self.budget}")

    def mixed(self) -> MixedPolicy:
        # One memoizing MixedPolicy per config; decisions depend only on the prefix.
        pol = self._mixed.get("policy")
        if pol is None:
            pol = MixedPolicy(self.primary, self.intervention, self.rule, self.budget, self.prompt)
            self._mixed["policy"] = pol
        return pol

    def with_budget(self, budget: int | None, seed: int | None = None) -> CrossSampleConfig:
        return CrossSampleConfig(
            self.primary, self.intervention, self.rule, self.limits, budget,
            self.seed if seed is None else seed, self.prompt,
        )

    def reversed(self) -> CrossSampleConfig:
        """Swap primary and intervention roles (forward <-> reverse)."""
        return CrossSampleConfig(
            self.intervention, self.primary, self.rule, self.limits, self.budget, self.seed, self.prompt
        )


@dataclass(frozen=True)
class Intervention:
    pos: int
    primary_token: int
    intervention_token: int
    js: float

    @property
    def identity(self) -> bool:
        return self.primary_token == self.intervention_token


@dataclass(frozen=True)
class CrossSampleTrace:
    tokens: tuple[int, ...]
    interventions: tuple[Intervention, ...]
    terminated_by: str  # "EOS" or "T_MAX"
    seed: int

    @property
    def total_count(self) -> int:
        return len(self.interventions)

    @property
    def effective_count(self) -> int:
        return sum(not iv.identity for iv in self.interventions)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "tokens": list(self.tokens),
            "interventions": [
                {"pos": iv.pos, "primary": iv.primary_token, "intervention": iv.intervention_token, "js": iv.js}
                for iv in self.interventions
            ],
            "effective_count": self.effective_count,
            "total_count": self.total_count,
            "terminated_by": self.terminated_by,
        }


def mixed_next_distribution(cfg: CrossSampleConfig, prefix: Sequence[int]) -> tuple[Distribution, bool]:
    """The distribution sampled from at ``prefix`` and whether it is the intervention one."""
    step = cfg.mixed().step(tuple(prefix))
    return step.dist, step.switched


def _generate(cfg: CrossSampleConfig, rng: random.Random, seed: int) -> CrossSampleTrace:
    mixed = cfg.mixed()
    eos = cfg.limits.eos_id
    prefix = cfg.prompt
    tokens: list[int] = []
    interventions: list[Intervention] = []
    terminated = "T_MAX"
    for pos in range(cfg.limits.t_max):
        step: Step = mixed.step(prefix)
        u = rng.random()
        tok = step.dist.inverse_cdf(u)
        if step.switched:
            coupled = step.primary.inverse_cdf(u)
            interventions.append(Intervention(pos, coupled, tok, step.divergence))
        tokens.append(tok)
        prefix = prefix + (tok,)
        if tok == eos:
            terminated = "EOS"
            break
    return CrossSampleTrace(tuple(tokens), tuple(interventions), terminated, seed)


def cross_sample_generate(cfg: CrossSampleConfig, rng: random.Random | None = None) -> CrossSampleTrace:
    """One cross-sampled response.

    ``rng`` lets batch callers share one stream across many runs; by default
    a fresh ``random.Random(cfg.seed)`` is used.
    """
    if rng is None:
        rng = random.Random(cfg.seed)
    return _generate(cfg, rng, cfg.seed)


def sample_sequence(
    policy: PolicyProvider,
    limits: GenerationLimits,
    seed: int,
    trunc: TruncationSpec = NO_TRUNCATION,
    prompt: Sequence[int] = (),
) -> tuple[int, ...]:
    """Plain ancestral sampling with the same uniform stream and inverse-CDF map."""
    rng = random.Random(seed)
    prefix = tuple(prompt)
    out = []
    for _ in range(limits.t_max):
        tok = truncate_top_p(policy.next_dist(prefix), trunc).inverse_cdf(rng.random())
        out.append(tok)
        prefix += (tok,)
        if tok == limits.eos_id:
            break
    return tuple(out)


def derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


# --------------------------------------------------------------------------
# predicates and sweeps

Predicate = Callable[[Sequence[int]], bool]


def parse_predicate(text: str) -> Predicate:
    """Built-in success predicates.

    ``contains-token:ID``, ``ends-with:ID`` (the last token, or the last
    non-EOS token when written ``ends-with:ID:EOS``), and
    ``count-token:ID:N`` (ID appears at least N times).
    """
    name, _, rest = text.partition(":")
    args = rest.split(":") if rest else []
    try:
        nums = [int(a) for a in args]
    except ValueError:
        raise ValueError(f"bad predicate arguments in {text!r}") from None
    if name == "contains-token" and len(nums) == 1:
        tid = nums[0]
        return lambda toks: tid in toks
    if name == "ends-with" and len(nums) in (1, 2):
        tid = nums[0]
        if len(nums) == 2:
            eos = nums[1]
            return lambda toks: bool(toks) and (toks[-2] if toks[-1] == eos and len(toks) > 1 else toks[-1]) == tid
        return lambda toks: bool(toks) and toks[-1] == tid
    if name == "count-token" and len(nums) == 2:
        tid, n = nums
        return lambda toks: sum(t == tid for t in toks) >= n
    raise ValueError(f"unknown predicate {text!r}")


@dataclass(frozen=True)
class BudgetPoint:
    budget: int | None
    n_samples: int
    success_rate: float
    mean_effective: float
    mean_total: float
    mean_effective_pct: float


def budget_sweep(
    cfg: CrossSampleConfig,
    budgets: Sequence[int | None],
    n_samples: int,
    success: Predicate,
    jobs: int = 1,
) -> tuple[list[BudgetPoint], list[list[CrossSampleTrace]]]:
    """Success rate and intervention counts as the budget grows.

    Sample ``i`` uses seed ``derive_seed(cfg.seed, i)`` at every budget, so
    each budget point is re-seeded identically (common random numbers).
    """
    finite = [b for b in budgets if b is not None]
    if finite != sorted(finite) or (None in budgets and budgets[-1] is not None):
        raise ValueError("budgets must be non-decreasing (None = unlimited last)")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    seeds = [derive_seed(cfg.seed, i) for i in range(n_samples)]
    points, all_traces = [], []
    for b in budgets:
        bcfg = cfg.with_budget(b)
        traces = run_many(bcfg, seeds, jobs)
        n = len(traces)
        points.append(
            BudgetPoint(
                budget=b,
                n_samples=n,
                success_rate=sum(bool(success(t.tokens)) for t in traces) / n,
                mean_effective=sum(t.effective_count for t in traces) / n,
                mean_total=sum(t.total_count for t in traces) / n,
                mean_effective_pct=100.0 * sum(t.effective_count / len(t.tokens) for t in traces) / n,
            )
        )
        all_traces.append(traces)
    return points, all_traces


def _run(cfg: CrossSampleConfig, seed: int) -> CrossSampleTrace:
    return _generate(cfg, random.Random(seed), seed)


def _run_chunk(cfg: CrossSampleConfig, seeds: Sequence[int]) -> list[CrossSampleTrace]:
    return [_run(cfg, s) for s in seeds]


def run_many(cfg: CrossSampleConfig, seeds: Sequence[int], jobs: int = 1) -> list[CrossSampleTrace]:
    """One trace per seed, in seed order whatever the worker count.

    With ``jobs > 1`` the providers must be picklable (toy and replay
    policies are).
    """
    if jobs <= 1 or len(seeds) < 2 * jobs:
        return _run_chunk(cfg, seeds)
    size = -(-len(seeds) // jobs)
    chunks = [seeds[i : i + size] for i in range(0, len(seeds), size)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = pool.map(_run_chunk, [cfg] * len(chunks), chunks)
        return [t for part in parts for t in part]


def replacement_pair_histogram(traces: Sequence[CrossSampleTrace]) -> dict[tuple[int, int], int]:
    """Counts of (coupled primary token -> intervention token), identity swaps excluded."""
    if not traces:
        raise ValueError("no traces")
    c = Counter(
        (iv.primary_token, iv.intervention_token)
        for tr in traces
        for iv in tr.interventions
        if not iv.identity
    )
    return dict(sorted(c.items()))
