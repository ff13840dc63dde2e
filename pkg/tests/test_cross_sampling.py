import json
import random
from collections import Counter

import pytest

from tokenshift.cross_sampling import (
    CrossSampleConfig,
    CrossSampleTrace,
    Intervention,
    budget_sweep,
    cross_sample_generate,
    derive_seed,
    mixed_next_distribution,
    parse_predicate,
    replacement_pair_histogram,
    run_many,
    sample_sequence,
)
from tokenshift.dist import Distribution, TruncationSpec
from tokenshift.policies import CallablePolicy, GenerationLimits, MemorylessPolicy, SwitchingRule

from .helpers import toy_pair

PM = Distribution.point_mass


def positional(V, fn):
    """Policy whose next token distribution depends only on the position."""
    return CallablePolicy(V, lambda h: fn(len(h)))


def test_zero_budget_equals_plain_sampler():
    a, b = toy_pair(0, 5)
    lim = GenerationLimits(8, 4)
    for i in range(200):
        s = derive_seed(7, i)
        tr = cross_sample_generate(CrossSampleConfig(a, b, SwitchingRule(0.0), lim, budget=0, seed=s))
        assert tr.total_count == 0
        assert json.dumps(list(tr.tokens)).encode() == json.dumps(list(sample_sequence(a, lim, s))).encode()


def test_identical_policies_never_intervene():
    a, _ = toy_pair(1, 4)
    for s in range(20):
        tr = cross_sample_generate(CrossSampleConfig(a, a, SwitchingRule(0.0), GenerationLimits(6, 3), seed=s))
        assert tr.interventions == ()


def test_three_position_disagreement():
    D_POS = {1, 3, 4}
    prim = positional(4, lambda t: PM(0, 4))
    intv = positional(4, lambda t: PM(1, 4) if t in D_POS else PM(0, 4))
    tr = cross_sample_generate(CrossSampleConfig(prim, intv, SwitchingRule(0.5), GenerationLimits(6), seed=3))
    assert tr.total_count == 3 and tr.effective_count == 3
    assert [iv.pos for iv in tr.interventions] == sorted(D_POS)
    assert tr.tokens == (0, 1, 0, 1, 1, 0)
    assert tr.terminated_by == "T_MAX"
    assert all((iv.primary_token, iv.intervention_token) == (0, 1) for iv in tr.interventions)


def test_budget_caps_interventions():
    prim = positional(4, lambda t: PM(0, 4))
    intv = positional(4, lambda t: PM(1, 4))
    for k in range(5):
        tr = cross_sample_generate(CrossSampleConfig(prim, intv, SwitchingRule(0.1), GenerationLimits(6), budget=k))
        assert tr.total_count == k
        assert tr.tokens == (1,) * k + (0,) * (6 - k)


def test_eos_terminates_and_prompt():
    prim = positional(3, lambda t: PM(2, 3) if t >= 3 else PM(0, 3))
    cfg = CrossSampleConfig(prim, prim, SwitchingRule(0.1), GenerationLimits(10, 2), prompt=(1,))
    tr = cross_sample_generate(cfg)
    # prompt has length 1, so EOS comes after two generated tokens
    assert tr.tokens == (0, 0, 2) and tr.terminated_by == "EOS"


def test_identity_swap_detected():
    # the two distributions differ but the same uniform maps to the same token
    prim = MemorylessPolicy(Distribution.dense([0.9, 0.1]))
    intv = MemorylessPolicy(Distribution.dense([0.6, 0.4]))
    cfg = CrossSampleConfig(prim, intv, SwitchingRule(0.0), GenerationLimits(50))
    tr = cross_sample_generate(cfg)
    assert tr.total_count == 50
    ident = sum(iv.identity for iv in tr.interventions)
    assert tr.effective_count == 50 - ident
    # u < 0.6 -> both pick 0; 0.9 <= u -> both pick 1; only [0.6, 0.9) swaps
    rng = random.Random(0)
    us = [rng.random() for _ in range(50)]
    assert tr.effective_count == sum(0.6 <= u < 0.9 for u in us)


def test_reproducible_and_json():
    a, b = toy_pair(2, 5)
    cfg = CrossSampleConfig(a, b, SwitchingRule(0.05), GenerationLimits(10, 4), seed=11)
    t1, t2 = cross_sample_generate(cfg), cross_sample_generate(cfg)
    assert t1 == t2
    j = t1.to_json()
    assert j["total_count"] == t1.total_count and j["tokens"] == list(t1.tokens)


def test_mixed_next_distribution_truncates():
    prim = MemorylessPolicy(Distribution.dense([0.6, 0.3, 0.1]))
    cfg = CrossSampleConfig(prim, prim, SwitchingRule(0.1, TruncationSpec(0.7)), GenerationLimits(2))
    d, switched = mixed_next_distribution(cfg, ())
    assert not switched and d.support == (0, 1)


def test_run_many_parallel_matches_serial():
    a, b = toy_pair(0, 4)
    cfg = CrossSampleConfig(a, b, SwitchingRule(0.05), GenerationLimits(6, 3))
    seeds = [derive_seed(1, i) for i in range(40)]
    assert run_many(cfg, seeds, jobs=1) == run_many(cfg, seeds, jobs=3)


# -- predicates


@pytest.mark.parametrize(
    "text, toks, want",
    [
        ("contains-token:2", (0, 2, 1), True),
        ("contains-token:2", (0, 1), False),
        ("ends-with:1", (0, 1), True),
        ("ends-with:1", (1, 0), False),
        ("ends-with:1:3", (0, 1, 3), True),
        ("ends-with:1:3", (0, 1), True),
        ("ends-with:1:3", (3,), False),
        ("count-token:1:2", (1, 0, 1), True),
        ("count-token:1:2", (1, 0, 0), False),
    ],
)
def test_predicates(text, toks, want):
    assert parse_predicate(text)(toks) is want


@pytest.mark.parametrize("text", ["contains-token", "bogus:1", "count-token:1", "ends-with:x"])
def test_bad_predicates(text):
    with pytest.raises(ValueError):
        parse_predicate(text)


# -- sweeps


def test_sweep_identical_policies_flat():
    a, _ = toy_pair(1, 4)
    cfg = CrossSampleConfig(a, a, SwitchingRule(0.0), GenerationLimits(5, 3), seed=2)
    pred = parse_predicate("contains-token:0")
    points, _ = budget_sweep(cfg, [0, 1, 2, None], 200, pred)
    base_rate = sum(pred(sample_sequence(a, cfg.limits, derive_seed(2, i))) for i in range(200)) / 200
    assert all(p.success_rate == base_rate for p in points)


def test_sweep_budget_zero_is_primary():
    a, b = toy_pair(0, 4)
    cfg = CrossSampleConfig(a, b, SwitchingRule(0.0), GenerationLimits(5, 3), seed=9)
    _, traces = budget_sweep(cfg, [0], 50, parse_predicate("contains-token:1"))
    assert [t.tokens for t in traces[0]] == [sample_sequence(a, cfg.limits, derive_seed(9, i)) for i in range(50)]


def test_sweep_validation():
    a, b = toy_pair(0, 3)
    cfg = CrossSampleConfig(a, b, SwitchingRule(0.0), GenerationLimits(3))
    pred = parse_predicate("contains-token:1")
    with pytest.raises(ValueError):
        budget_sweep(cfg, [2, 1], 10, pred)
    with pytest.raises(ValueError):
        budget_sweep(cfg, [None, 1], 10, pred)
    with pytest.raises(ValueError):
        budget_sweep(cfg, [1], 0, pred)


# -- replacement table


def _trace(pairs):
    ivs = tuple(Intervention(i, a, b, 0.5) for i, (a, b) in enumerate(pairs))
    return CrossSampleTrace(tuple(b for _, b in pairs), ivs, "T_MAX", 0)


def test_replacement_histogram_examples():
    assert replacement_pair_histogram([_trace([(1, 1), (2, 2)])]) == {}
    got = replacement_pair_histogram([_trace([(0, 1), (0, 2)]), _trace([(0, 1), (3, 3)])])
    assert got == {(0, 1): 2, (0, 2): 1}
    with pytest.raises(ValueError):
        replacement_pair_histogram([])


def test_replacement_histogram_recount():
    a, b = toy_pair(0, 6)
    cfg = CrossSampleConfig(a, b, SwitchingRule(0.02), GenerationLimits(10, 5))
    traces = run_many(cfg, [derive_seed(4, i) for i in range(300)])
    want = Counter()
    for tr in traces:
        for iv in tr.interventions:
            if iv.primary_token != iv.intervention_token:
                want[(iv.primary_token, iv.intervention_token)] += 1
    assert replacement_pair_histogram(traces) == dict(want)
