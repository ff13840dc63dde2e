"""Quick oracle and property checks runnable without pytest (``tokenshift selftest``)."""

from __future__ import annotations

import math
import random
from typing import Callable

from .cross_sampling import CrossSampleConfig, cross_sample_generate, derive_seed, sample_sequence
from .dist import LN2, Distribution, js_divergence, kl_divergence, skew_js_divergence
from .mechanics import weight_gap_ratio
from .policies import GenerationLimits, Shift, SwitchingRule, ToyPolicySpec, build_toy_pair
from .rl_weighting import ClipParams, WeightingParams, dapo_token_objective, group_advantage, k3_kl_estimate, sigmoid_weight
from .seq_bounds import verify_js_decomposition, verify_kl_chain_rule, verify_kl_eps_bound


def _random_dist(rng: random.Random, V: int) -> Distribution:
    w = [rng.random() if rng.random() < 0.8 else 0.0 for _ in range(V)]
    w[rng.randrange(V)] += 0.1
    return Distribution.from_pairs(enumerate(w), V)


def _pairs(seed: int, n: int, V: int = 3):
    for i in range(n):
        s = derive_seed(seed, i)
        spec = ToyPolicySpec(V, order=2, seed=s, kind=("tabular-markov", "softmax-ngram")[i % 2])
        yield build_toy_pair(spec, Shift(derive_seed(s, 1), 0.5, 1.5))


def _divergences(seed: int) -> bool:
    rng = random.Random(seed)
    for _ in range(2000):
        V = rng.randint(2, 12)
        p, q = _random_dist(rng, V), _random_dist(rng, V)
        js = js_divergence(p, q)
        if abs(js - js_divergence(q, p)) > 1e-12 or not -1e-12 <= js <= LN2 + 1e-12:
            return False
        if abs(skew_js_divergence(p, q, 0.5) - js) > 1e-12:
            return False
        if set(p.support) <= set(q.support) and kl_divergence(p, q) < 0:
            return False
    return True


def _chain_rules(seed: int) -> bool:
    lim = GenerationLimits(4, 2)
    return all(
        verify_kl_chain_rule(a, b, lim).passed and verify_js_decomposition(a, b, lim).passed
        for a, b in _pairs(seed, 5)
    )


def _kl_bound(seed: int) -> bool:
    lim = GenerationLimits(4, 2)
    for a, b in _pairs(seed, 5):
        for eps in (0.01, 0.1, 0.5):
            r = verify_kl_eps_bound(a, b, eps, lim)
            if not (r.holds and r.identity_ok and r.kappa_bar <= eps + 1e-12):
                return False
    return True


def _zero_budget(seed: int) -> bool:
    a, b = next(_pairs(seed, 1, V=4))
    lim = GenerationLimits(6, 3)
    for i in range(50):
        s = derive_seed(seed, 100 + i)
        cfg = CrossSampleConfig(a, b, SwitchingRule(0.0), lim, budget=0, seed=s)
        tr = cross_sample_generate(cfg)
        if tr.tokens != sample_sequence(a, lim, s) or tr.total_count:
            return False
    return True


def _rl_numerics(seed: int) -> bool:
    return (
        abs(k3_kl_estimate(2.0) - 0.306853) <= 1e-6
        and abs(sigmoid_weight(math.log(3.0), WeightingParams(0.3, 1.0)) - 1.075) <= 1e-9
        and dapo_token_objective(1.5, 1.0, ClipParams(0.2, 0.28)) == 1.28
        and abs(dapo_token_objective(0.5, -1.0, ClipParams(0.2, 0.28)) + 0.8) <= 1e-15
        and group_advantage([1, 0, 0, 1]) == [1.0, -1.0, -1.0, 1.0]
        and abs(weight_gap_ratio([1, 1], [1, 0]) - 1 / 3) <= 1e-12
    )


CHECKS: list[tuple[str, Callable[[int], bool]]] = [
    ("divergence identities (2000 random pairs)", _divergences),
    ("KL chain rule and JS skew decomposition (5 toy pairs)", _chain_rules),
    ("KL threshold bound (5 toy pairs x 3 epsilons)", _kl_bound),
    ("zero budget equals plain sampling (50 seeds)", _zero_budget),
    ("RL weighting reference values", _rl_numerics),
]


def run_selftest(seed: int = 0, echo: Callable[[str], None] = print) -> bool:
    ok = True
    for name, fn in CHECKS:
        try:
            passed = fn(seed)
        except Exception as exc:  # noqa: BLE001 - report, keep going
            passed = False
            name = f"{name} [{type(exc).__name__}: {exc}]"
        echo(f"{'PASS' if passed else 'FAIL'}  {name}")
        ok = ok and passed
    echo("selftest: all checks passed" if ok else "selftest: FAILED")
    return ok
