"""Exact sequence laws on tiny instances and checks of the sequence-level
KL / JS decompositions and their token-threshold bounds.

Sequences live on the fixed horizon ``t_max`` with EOS absorbing: once EOS
is emitted every later token is EOS with probability one, and neither
policy is queried again.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .dist import Distribution, kl_divergence, skew_js_divergence
from .errors import AbsoluteContinuityViolation, HypothesisViolated, InstanceTooLarge
from .policies import GenerationLimits, MixedPolicy, PolicyProvider, SwitchingRule, TruncatedPolicy

MAX_SEQUENCES = 10**7
CHAIN_RULE_TOL = 1e-10
BOUND_SLACK = 1e-12

SequenceLaw = dict  # dict[tuple[int, ...], float]; every key has length t_max


def _guard(vocab_size: int, limits: GenerationLimits) -> None:
    if vocab_size ** limits.t_max > MAX_SEQUENCES:
        raise InstanceTooLarge(
            f"V^T = {vocab_size}^{limits.t_max} exceeds the {MAX_SEQUENCES} sequence limit"
        )


def _absorbed(h: tuple[int, ...], eos: int | None) -> bool:
    return eos is not None and eos in h


def enumerate_law(policy: PolicyProvider, limits: GenerationLimits, prompt: Sequence[int] = ()) -> SequenceLaw:
    """Product-of-conditionals law over all length-``t_max`` continuations."""
    _guard(policy.vocab_size, limits)
    prompt = tuple(prompt)
    eos = limits.eos_id
    law: SequenceLaw = {}

    def walk(h: tuple[int, ...], mass: float) -> None:
        if len(h) == limits.t_max:
            law[h] = mass
            return
        if _absorbed(h, eos):
            walk(h + (eos,), mass)
            return
        d = policy.next_dist(prompt + h)
        for t, p in zip(d.support, d.probs):
            walk(h + (t,), mass * p)

    walk((), 1.0)
    return dict(sorted(law.items()))


def law_mass(law: SequenceLaw) -> float:
    return math.fsum(law.values())


def is_eos_absorbed(seq: Sequence[int], eos: int | None) -> bool:
    if eos is None or eos not in seq:
        return True
    i = list(seq).index(eos)
    return all(t == eos for t in seq[i:])


def law_probability(law: SequenceLaw, predicate: Callable[[Sequence[int]], bool], eos: int | None = None) -> float:
    """P(predicate) with sequences cut back to their response ``x[1:tau]``."""
    return math.fsum(p for s, p in law.items() if predicate(strip_absorbed(s, eos)))


def strip_absorbed(seq: Sequence[int], eos: int | None) -> tuple[int, ...]:
    seq = tuple(seq)
    if eos is not None and eos in seq:
        return seq[: seq.index(eos) + 1]
    return seq


def sequence_kl(P: SequenceLaw, Q: SequenceLaw) -> float:
    terms = []
    for s, p in P.items():
        if p == 0.0:
            continue
        q = Q.get(s, 0.0)
        if q == 0.0:
            raise AbsoluteContinuityViolation(f"sequence {s} has P-mass {p!r} but zero Q-mass")
        terms.append(p * math.log(p / q))
    return max(math.fsum(terms), 0.0)


def sequence_js(P: SequenceLaw, Q: SequenceLaw) -> float:
    terms = []
    for s in P.keys() | Q.keys():
        p, q = P.get(s, 0.0), Q.get(s, 0.0)
        if p > 0.0:
            terms.append(p * math.log(2.0 * p / (p + q)))
        if q > 0.0:
            terms.append(q * math.log(2.0 * q / (p + q)))
    return max(0.5 * math.fsum(terms), 0.0)


# --------------------------------------------------------------------------
# prefix marginals (forward accumulation, independent of enumerate_law)


def prefix_marginals(
    policy: PolicyProvider, limits: GenerationLimits, prompt: Sequence[int] = ()
) -> list[dict[tuple[int, ...], float]]:
    """``out[t][h]`` = probability that the first ``t`` generated tokens are ``h``.

    Only live (non-absorbed) histories are kept past the first EOS, since
    absorbed histories contribute nothing to any per-step divergence.
    """
    _guard(policy.vocab_size, limits)
    prompt = tuple(prompt)
    eos = limits.eos_id
    layers: list[dict[tuple[int, ...], float]] = [{(): 1.0}]
    for _ in range(limits.t_max - 1):
        nxt: dict[tuple[int, ...], list[float]] = {}
        for h, m in layers[-1].items():
            if _absorbed(h, eos):
                continue
            d = policy.next_dist(prompt + h)
            for t, p in zip(d.support, d.probs):
                nxt.setdefault(h + (t,), []).append(m * p)
        layers.append({h: math.fsum(v) for h, v in nxt.items()})
    return layers


def _live(layer: dict, eos: int | None):
    return ((h, m) for h, m in layer.items() if m > 0.0 and not _absorbed(h, eos))


@dataclass(frozen=True)
class ChainRuleReport:
    lhs: float
    rhs: float
    diff: float
    passed: bool
    alpha_table: dict = field(default_factory=dict, repr=False)


def verify_kl_chain_rule(
    P_policy: PolicyProvider, Q_policy: PolicyProvider, limits: GenerationLimits, prompt: Sequence[int] = ()
) -> ChainRuleReport:
    """sequence KL(P || Q) against the sum of P-marginal-weighted per-step KLs."""
    lhs = sequence_kl(enumerate_law(P_policy, limits, prompt), enumerate_law(Q_policy, limits, prompt))
    prompt = tuple(prompt)
    terms = []
    for layer in prefix_marginals(P_policy, limits, prompt):
        for h, m in _live(layer, limits.eos_id):
            terms.append(m * kl_divergence(P_policy.next_dist(prompt + h), Q_policy.next_dist(prompt + h)))
    rhs = math.fsum(terms)
    diff = abs(lhs - rhs)
    return ChainRuleReport(lhs, rhs, diff, diff <= CHAIN_RULE_TOL)


def verify_js_decomposition(
    P_policy: PolicyProvider, Q_policy: PolicyProvider, limits: GenerationLimits, prompt: Sequence[int] = ()
) -> ChainRuleReport:
    """sequence JS(P, Q) against the M-weighted per-step skew-JS terms.

    ``alpha_table`` maps ``(t, h)`` (t 1-based) to P_<t(h) / (P_<t(h) + Q_<t(h)).
    """
    lhs = sequence_js(enumerate_law(P_policy, limits, prompt), enumerate_law(Q_policy, limits, prompt))
    prompt = tuple(prompt)
    eos = limits.eos_id
    p_layers = prefix_marginals(P_policy, limits, prompt)
    q_layers = prefix_marginals(Q_policy, limits, prompt)
    terms, alphas = [], {}
    for t, (pl, ql) in enumerate(zip(p_layers, q_layers), start=1):
        for h in sorted(pl.keys() | ql.keys()):
            if _absorbed(h, eos):
                continue
            pm, qm = pl.get(h, 0.0), ql.get(h, 0.0)
            if pm + qm <= 0.0:
                continue
            a = pm / (pm + qm)
            alphas[(t, h)] = a
            sj = skew_js_divergence(P_policy.next_dist(prompt + h), Q_policy.next_dist(prompt + h), a)
            terms.append(0.5 * (pm + qm) * sj)
    rhs = math.fsum(terms)
    diff = abs(lhs - rhs)
    return ChainRuleReport(lhs, rhs, diff, diff <= CHAIN_RULE_TOL, alphas)


# --------------------------------------------------------------------------
# threshold bounds


@dataclass(frozen=True)
class KLBoundReport:
    epsilon: float
    kl_mix_int: float
    expected_n0: float
    eps_times_EN0: float
    kappa_bar: float
    identity_diff: float
    identity_ok: bool
    holds: bool


def _n0_and_weighted(
    layers: list[dict],
    mixed: MixedPolicy,
    eos: int | None,
    prompt: tuple,
    per_step: Callable[[tuple, Distribution, Distribution], float],
) -> tuple[float, float]:
    """(sum of marginal mass on non-switch live steps, same weighted by per_step)."""
    n0, weighted = [], []
    for layer in layers:
        for h, m in _live(layer, eos):
            st = mixed.step(prompt + h)
            if not st.switched:
                n0.append(m)
                weighted.append(m * per_step(h, st.primary, st.intervention))
    return math.fsum(n0), math.fsum(weighted)


def verify_kl_eps_bound(
    prim: PolicyProvider,
    intv: PolicyProvider,
    epsilon_kl: float,
    limits: GenerationLimits,
    prompt: Sequence[int] = (),
    rule: SwitchingRule | None = None,
) -> KLBoundReport:
    """KL(P_mix || P_int) <= eps * E_mix[N0] for the KL-threshold switching rule."""
    prompt = tuple(prompt)
    rule = rule or SwitchingRule(epsilon_kl, divergence="kl")
    if rule.divergence != "kl":
        raise ValueError("the KL bound needs a KL switching rule")
    mixed = MixedPolicy(prim, intv, rule, None, prompt)
    intv_t = TruncatedPolicy(intv, rule.trunc)
    kl = sequence_kl(enumerate_law(mixed, limits, prompt), enumerate_law(intv_t, limits, prompt))
    layers = prefix_marginals(mixed, limits, prompt)
    en0, num = _n0_and_weighted(layers, mixed, limits.eos_id, prompt, lambda h, p, q: kl_divergence(p, q))
    kappa = num / en0 if en0 > 0 else 0.0
    ident = abs(kl - kappa * en0)
    bound = rule.epsilon * en0
    return KLBoundReport(
        rule.epsilon, kl, en0, bound, kappa, ident, ident <= CHAIN_RULE_TOL, kl <= bound + BOUND_SLACK
    )


@dataclass(frozen=True)
class JSBoundReport:
    epsilon: float
    js_mix_int: float
    expected_n0_M: float
    eps_times_EN0_M: float
    expected_n0_mix: float
    expected_n0_int: float
    eps_half_sum: float  # eps/2 * (E_mix[N0] + E_int[N0])
    j_bar: float
    identity_diff: float
    identity_ok: bool
    holds: bool


def _expected_n0(law: SequenceLaw, mixed: MixedPolicy, eos: int | None, prompt: tuple) -> float:
    """E[N0] under ``law``, counted per sequence along x[1:tau]."""
    terms = []
    for s, p in law.items():
        resp = strip_absorbed(s, eos)
        n0 = sum(not mixed.step(prompt + resp[:t]).switched for t in range(len(resp)))
        terms.append(p * n0)
    return math.fsum(terms)


def verify_js_eps_bound(
    prim: PolicyProvider,
    intv: PolicyProvider,
    epsilon: float,
    limits: GenerationLimits,
    prompt: Sequence[int] = (),
    rule: SwitchingRule | None = None,
) -> JSBoundReport:
    """JS(P_mix, P_int) <= eps * E_M[N0], after checking the skew-JS hypothesis.

    The hypothesis (skew-JS at alpha_t(h) <= eps at every reachable
    non-switch history) is checked rather than assumed, because a plain JS
    threshold does not imply it.  Violations raise HypothesisViolated.
    """
    prompt = tuple(prompt)
    eos = limits.eos_id
    rule = rule or SwitchingRule(epsilon)
    mixed = MixedPolicy(prim, intv, rule, None, prompt)
    intv_t = TruncatedPolicy(intv, rule.trunc)
    mix_layers = prefix_marginals(mixed, limits, prompt)
    int_layers = prefix_marginals(intv_t, limits, prompt)

    violations = []
    en0_terms, weighted = [], []
    for t, (ml, il) in enumerate(zip(mix_layers, int_layers), start=1):
        for h in sorted(ml.keys() | il.keys()):
            if _absorbed(h, eos):
                continue
            pm, qm = ml.get(h, 0.0), il.get(h, 0.0)
            if pm + qm <= 0.0:
                continue
            st = mixed.step(prompt + h)
            if st.switched:
                continue
            a = pm / (pm + qm)
            sj = skew_js_divergence(st.primary, st.intervention, a)
            if sj > epsilon + BOUND_SLACK:
                violations.append({"t": t, "history": list(h), "alpha": a, "skew_js": sj})
            m = 0.5 * (pm + qm)
            en0_terms.append(m)
            weighted.append(m * sj)
    if violations:
        raise HypothesisViolated(
            f"{len(violations)} non-switch histories have skew-JS above epsilon={epsilon}", violations
        )
    mix_law = enumerate_law(mixed, limits, prompt)
    int_law = enumerate_law(intv_t, limits, prompt)
    js = sequence_js(mix_law, int_law)
    en0 = math.fsum(en0_terms)
    j_bar = math.fsum(weighted) / en0 if en0 > 0 else 0.0
    ident = abs(js - j_bar * en0)
    e_mix = _expected_n0(mix_law, mixed, eos, prompt)
    e_int = _expected_n0(int_law, mixed, eos, prompt)
    return JSBoundReport(
        epsilon=epsilon,
        js_mix_int=js,
        expected_n0_M=en0,
        eps_times_EN0_M=epsilon * en0,
        expected_n0_mix=e_mix,
        expected_n0_int=e_int,
        eps_half_sum=0.5 * epsilon * (e_mix + e_int),
        j_bar=j_bar,
        identity_diff=ident,
        identity_ok=ident <= CHAIN_RULE_TOL,
        holds=js <= epsilon * en0 + BOUND_SLACK,
    )
