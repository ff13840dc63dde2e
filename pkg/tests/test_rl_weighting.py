import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tokenshift.errors import GroupDegenerate, LengthMismatch, NonPositiveRatio, ScheduleInvalid
from tokenshift.rl_weighting import (
    AlphaSchedule,
    ClipParams,
    WeightingParams,
    alpha_schedule,
    dapo_group_objective,
    dapo_token_objective,
    divergence_weighted_advantage,
    dynamic_sampling_admissible,
    evaluate_rows,
    group_advantage,
    k3_kl_estimate,
    sigmoid_weight,
)

CLIP = ClipParams(0.2, 0.28)


def test_group_advantage_examples():
    assert group_advantage([1, 0, 0, 1]) == [1.0, -1.0, -1.0, 1.0]
    assert group_advantage([0, 1]) == [-1.0, 1.0]
    with pytest.raises(GroupDegenerate):
        group_advantage([1, 1, 1, 1])
    with pytest.raises(GroupDegenerate):
        group_advantage([1])


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=20))
def test_group_advantage_standardized(rs):
    try:
        adv = group_advantage(rs)
    except GroupDegenerate:
        return
    assert abs(math.fsum(adv)) <= 1e-9 * len(rs)
    assert math.fsum(a * a for a in adv) / len(adv) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("c, G, want", [(0, 8, False), (8, 8, False), (3, 8, True)])
def test_dynamic_sampling(c, G, want):
    assert dynamic_sampling_admissible(c, G) is want


def test_dynamic_sampling_range():
    with pytest.raises(ValueError):
        dynamic_sampling_admissible(9, 8)


def test_k3_examples():
    assert k3_kl_estimate(1.0) == 0.0
    assert k3_kl_estimate(2.0) == pytest.approx(2 - math.log(2) - 1, abs=1e-15)
    assert abs(k3_kl_estimate(2.0) - 0.306853) <= 1e-6
    assert abs(k3_kl_estimate(0.5) - 0.193147) <= 1e-6
    for bad in (0.0, -1.0):
        with pytest.raises(NonPositiveRatio):
            k3_kl_estimate(bad)


@given(st.floats(1e-6, 1e6))
def test_k3_nonnegative(r):
    assert k3_kl_estimate(r) >= 0.0


def test_k3_near_one_no_cancellation():
    # d - log1p(d) ~ d^2/2 for small d
    assert k3_kl_estimate(1 + 1e-8) == pytest.approx(0.5e-16, rel=1e-6)


def test_sigmoid_weight_examples():
    assert sigmoid_weight(5.0, WeightingParams(0.3, 0.0)) == 1.0
    assert sigmoid_weight(0.0, WeightingParams(0.3, 7.0)) == 1.0
    assert abs(sigmoid_weight(math.log(3), WeightingParams(0.3, 1.0)) - 1.075) <= 1e-9
    with pytest.raises(ValueError):
        sigmoid_weight(-0.1, WeightingParams())


@given(st.floats(0, 1e6), st.floats(0, 1), st.floats(0, 100))
def test_sigmoid_weight_range(kl, s, a):
    w = sigmoid_weight(kl, WeightingParams(s, a))
    assert 1.0 <= w <= 1.0 + s / 2 + 1e-15


def test_weighted_advantage():
    assert divergence_weighted_advantage([0.5, -1.0], [3.0, 1.0], WeightingParams(0.3, 0.0)) == [0.5, -1.0]
    assert divergence_weighted_advantage([0.0], [9.0], WeightingParams()) == [0.0]
    got = divergence_weighted_advantage([1.0], [math.log(3)], WeightingParams(0.3, 1.0))
    assert got == [pytest.approx(1.075, abs=1e-9)]
    with pytest.raises(LengthMismatch):
        divergence_weighted_advantage([1.0], [], WeightingParams())


def test_dapo_examples():
    assert dapo_token_objective(1.0, 0.7, CLIP) == 0.7
    assert dapo_token_objective(1.5, 1.0, CLIP) == 1.28
    assert abs(dapo_token_objective(0.5, -1.0, CLIP) - (-0.8)) <= 1e-15
    with pytest.raises(NonPositiveRatio):
        dapo_token_objective(0.0, 1.0, CLIP)
    with pytest.raises(ValueError):
        ClipParams(0.0, 0.2)


def test_dapo_group_token_average():
    got = dapo_group_objective([[1.0, 1.5], [0.5]], [[1.0, 1.0], [-1.0]], CLIP)
    assert got == pytest.approx((1.0 + 1.28 - 0.8) / 3, abs=1e-15)
    with pytest.raises(LengthMismatch):
        dapo_group_objective([[1.0]], [[1.0, 2.0]], CLIP)


def test_alpha_schedule():
    sch = AlphaSchedule(100, 200, 50.0)
    assert alpha_schedule(10, sch) == 0.0
    assert alpha_schedule(150, sch) == 25.0
    assert alpha_schedule(200, sch) == 50.0
    assert alpha_schedule(900, sch) == 50.0
    with pytest.raises(ScheduleInvalid):
        AlphaSchedule(10, 10, 1.0)


def test_evaluate_rows():
    rows = [{"ratio": 1.5, "advantage": 1.0, "kl": 0.0}, {"ratio": 2.0, "advantage": -1.0}]
    out = evaluate_rows(rows, WeightingParams(0.3, 1.0), CLIP)
    assert out[0].kl_source == "caller" and out[0].weight == 1.0 and out[0].surrogate == 1.28
    assert out[1].kl_source == "k3-sampled"
    assert out[1].kl == pytest.approx(0.306853, abs=1e-6)
    assert out[1].weighted_advantage == out[1].weight * -1.0
    with pytest.raises(ValueError):
        evaluate_rows([{"ratio": 1.0}], WeightingParams(), CLIP)
